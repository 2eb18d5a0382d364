"""
Backend interfaces, deterministic doubles and the id registry.
"""

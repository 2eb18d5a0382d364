"""
Utilities package for the pipeline: errors, codecs and the manifest ledger.
"""

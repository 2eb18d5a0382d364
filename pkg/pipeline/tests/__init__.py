"""Test package for the pipeline."""

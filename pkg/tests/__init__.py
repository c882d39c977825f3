"""
Test package for the CoBra pipeline.
"""

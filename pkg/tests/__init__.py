"""
Unit tests for the fogpipe package.
"""

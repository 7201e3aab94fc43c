"""Command-line front end and evaluation helpers."""

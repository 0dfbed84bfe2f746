"""
Test package for eatlab.

One module per component; run everything with `python -m unittest discover tests`.
"""

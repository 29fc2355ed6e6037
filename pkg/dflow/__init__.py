"""Controlled generation by optimizing the source point of a flow ODE.
"""
VERSION = "0.3.0"

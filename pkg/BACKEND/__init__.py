"""Surrogate evaluation backend: trial simulation, samplers, LOO reports."""

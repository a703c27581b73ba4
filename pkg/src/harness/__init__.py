"""
Command line, synthetic data, persistence and experiment orchestration.
"""

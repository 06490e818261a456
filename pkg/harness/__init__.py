"""
Experiment harness: scenario configs, runners and result files.
"""

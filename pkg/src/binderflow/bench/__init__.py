"""Configuration, experiment orchestration, curves and the command line."""

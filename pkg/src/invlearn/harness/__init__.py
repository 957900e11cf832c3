"""Experiment orchestration: config, studies, reports and the command line."""

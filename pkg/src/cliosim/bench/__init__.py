"""Workload generation, experiment runners and the command-line harness."""

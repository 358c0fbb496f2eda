"""Training, evaluation, benchmarking and the command-line interface."""

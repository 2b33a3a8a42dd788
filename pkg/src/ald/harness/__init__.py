"""Oracles, metrics, dataset ingestion, experiment runner and command-line interface."""

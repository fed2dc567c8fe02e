"""Experiment configuration, file formats, pipeline steps and the ``kma`` CLI."""

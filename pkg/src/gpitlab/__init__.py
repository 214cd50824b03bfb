"""Transcription-free separator fine-tuning lab."""

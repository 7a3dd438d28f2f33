"""Offline exporter: backbone feature pyramids and caption embeddings as NPFT files."""

"""Bimanual action-chunking transformer policies with an inter-arm coordination encoder."""

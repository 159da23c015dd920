"""Operator surface: scenario CLI and the live-session HTTP/WS service."""

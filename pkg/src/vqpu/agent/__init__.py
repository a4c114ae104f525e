"""Execution-plane agent."""

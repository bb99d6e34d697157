"""Core package: exceptions and logging setup."""

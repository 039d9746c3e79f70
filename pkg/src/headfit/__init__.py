"""Personalized head representation: fitting, expression transfer, control signals."""

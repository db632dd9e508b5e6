"""Intersection forecasting project package."""

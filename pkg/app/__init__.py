"""Geodesic distances on curves and surfaces with the closest point heat method."""

"""Desk-scale toolkit for navigation-graph construction, trajectory sampling and imitation learning."""

from .nav_graph import NavGraph, OccupancyGrid, PanoNode, geodesic_distance, graph_shortest_path

__version__ = "0.1.0"

__all__ = ["NavGraph", "OccupancyGrid", "PanoNode", "geodesic_distance", "graph_shortest_path"]

"""Mesh-attached 2D Gaussian surfels: conversion, deformation, rendering and fitting."""

from .camera import Camera, look_at
from .inellipse import inellipse_axes, register_mesh
from .mesh import TriangleMesh, icosahedron, load_mesh, loop_subdivide, save_mesh
from .render import render, render_backward
from .scene import SurfelScene, init_scene, load_scene, save_scene

__version__ = "0.1.0"

__all__ = [
    "Camera", "SurfelScene", "TriangleMesh", "icosahedron", "inellipse_axes", "init_scene", "load_mesh", "load_scene",
    "look_at", "loop_subdivide", "register_mesh", "render", "render_backward", "save_mesh", "save_scene",
]

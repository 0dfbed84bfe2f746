# This file makes the routes directory a Python package
from .runs_routes import router as runs_router

__all__ = ["runs_router"]

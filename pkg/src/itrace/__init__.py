"""Full-3D image-theory ray tracer for outdoor radio propagation.

Beams are tracked as angular windows that shrink with every bounce, a
visibility tree holds primitive sequences without observation points, and a
batched shadow-testing/field pipeline evaluates complex E-fields at the
observation points.
"""

from .geom import Edge, Facet, Frame, Plane
from .azb import DiffAzbRect, ReflAzbRect
from .scene import Scene, generate_scene, load_scene
from .engine import SimConfig, RunResult, run, write_results

__version__ = "0.1.0"

__all__ = [
    "Edge",
    "Facet",
    "Frame",
    "Plane",
    "DiffAzbRect",
    "ReflAzbRect",
    "Scene",
    "generate_scene",
    "load_scene",
    "SimConfig",
    "RunResult",
    "run",
    "write_results",
]

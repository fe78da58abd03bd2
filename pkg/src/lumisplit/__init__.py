"""Light-decoupled albedo and multi-condition SH illumination recovery on a procedural proxy head."""
from .pipeline import FitConfig, FitResult, acceptance_config, fit, relight, swap_synthesize
from .synth import SceneSpec, gen_scene, make_pair

__version__ = "0.1.0"
__all__ = ["FitConfig", "FitResult", "SceneSpec", "acceptance_config", "fit", "gen_scene", "make_pair",
           "relight", "swap_synthesize"]

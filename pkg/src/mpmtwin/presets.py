"""Reference scene documents used by the test suite and the demo scripts.

Each builder returns a plain scene document (a JSON-serializable dict) that can
be written with save_scene and consumed by the command-line tools, or turned
into objects directly with scene_from_doc. The documents describe the *twin*:
the material block holds the initial guess handed to identification, while the
ground-truth parameters used to synthesize observations for each benchmark are
exported alongside as ``*_TRUE`` dicts (keys follow the scene-file convention:
E, nu, rho, y).

The five scenes:

- gradcheck_doc:   a 20-particle block squeezed between two spheres for 30
                   substeps; small enough that central finite differences of
                   the objective are cheap, rich enough (gravity, controller
                   contact, optional plastic flow) to exercise every term of
                   the adjoint.
- stretch_doc:     a bar gripped at both ends by spheres that pull apart while
                   gravity makes the span sag; the sag and ring-down are
                   sensitive to the Young's modulus, which identification has
                   to recover from a 10x-stiff initial guess.
- squeeze_doc:     a free-floating block squeezed far past yield by two
                   spheres that then release; the plastic variant keeps the
                   dent while the elastic variant rings back to shape.
- rope_doc:        a thin soft bar pinned at both ends streaming ~0.7 s of
                   sag-and-stretch motion for the online corrector.
- dough_doc:       an elastoplastic ball on a ground plane, poked twice by a
                   descending sphere, with pauses for quasi-static corrections.
"""

from __future__ import annotations

from .sceneio import LoadedScene, scene_from_doc

__all__ = [
    "gradcheck_doc",
    "stretch_doc",
    "squeeze_doc",
    "rope_doc",
    "dough_doc",
    "build",
    "GRADCHECK_PROBE_ELASTIC",
    "GRADCHECK_PROBE_PLASTIC",
    "STRETCH_TRUE",
    "ROPE_TRUE",
    "DOUGH_TRUE",
]

# Ground-truth parameters used to synthesize observations for each benchmark.
# The gradcheck probes only need to differ from the twin so the objective has
# a nonzero gradient at the twin's parameters.
GRADCHECK_PROBE_ELASTIC = {"E": 1.4e6, "nu": 0.25, "rho": 900.0}
GRADCHECK_PROBE_PLASTIC = {"E": 1.4e6, "nu": 0.25, "rho": 900.0, "y": 1.5e4}
STRETCH_TRUE = {"E": 1.0e5}
ROPE_TRUE = {"E": 5.0e4}
DOUGH_TRUE = {"E": 2.0e5}


def build(doc: dict) -> LoadedScene:
    """Materialize a preset document into scene + solver configuration."""
    return scene_from_doc(doc, where="preset")


def gradcheck_doc(*, plastic: bool = False) -> dict:
    """Gradient-validation scene: 20 particles, 30 substeps, two controllers.

    A small block sits between a stationary anvil sphere and a presser sphere
    that descends at ~4 m/s, compressing it by about a third of its height
    over the 6 ms run. Gravity keeps the density gradient alive, the squeeze
    drives volumetric and deviatoric strain (Young's modulus and Poisson's
    ratio), and the plastic variant yields deeply (squeeze strain ~0.3 against
    an elastic limit of ~0.026).
    """
    material = {"E": 1.0e6, "nu": 0.3, "rho": 1000.0,
                "y": 2.0e4 if plastic else "inf"}
    return {
        "grid": {"origin": [0.0, 0.0, 0.0], "dx": 0.05, "dims": [16, 13, 13]},
        "dt": 2.0e-4,
        "substeps_per_frame": 10,
        "frames": 3,
        "gravity": [0.0, 0.0, -9.81],
        "material": material,
        "particles": {"source": "box", "lo": [0.24, 0.28, 0.28],
                      "hi": [0.44, 0.36, 0.36], "spacing": 0.04,
                      "jitter": 0.3, "seed": 1},
        "controllers": [
            {"shape": "sphere", "radius": 0.08,
             "motion": {"times": [0.0, 0.006],
                        "poses": [[0.34, 0.32, 0.47], [0.34, 0.32, 0.445]]}},
            {"shape": "sphere", "radius": 0.08,
             "motion": {"times": [0.0, 0.006],
                        "poses": [[0.34, 0.32, 0.17], [0.34, 0.32, 0.17]]}},
        ],
        "loss_weights": {"dist": 1.0, "track": 1.0, "mask": 0.0},
    }


def stretch_doc() -> dict:
    """Parameter-recovery benchmark: a bar stretched between two grippers.

    The twin starts ten times too stiff (E 1e6 vs the true 1e5). Two sphere
    grippers grab the bar ends, hold briefly, pull apart by 10% of the bar
    length on each side, then hold while the stretched span sags and rings
    under gravity - both strongly modulated by the Young's modulus. The
    optimizer block carries the benchmark's gradient settings; the CMA-ES
    population/step-size pair is sized for recovery within ~50 generations.
    """
    return {
        "grid": {"origin": [0.0, 0.0, 0.0], "dx": 0.05, "dims": [17, 16, 16]},
        "dt": 2.0e-4,
        "substeps_per_frame": 20,
        "frames": 10,
        "gravity": [0.0, 0.0, -9.81],
        "material": {"E": 1.0e6, "nu": 0.3, "rho": 1000.0, "y": "inf",
                     "frozen": ["nu", "rho"],
                     "bounds": {"E": [1.0e4, 3.0e6]}},
        "particles": {"source": "box", "lo": [0.25, 0.37, 0.47],
                      "hi": [0.55, 0.43, 0.53], "spacing": 0.02,
                      "jitter": 0.25, "seed": 2},
        "controllers": [
            {"shape": "sphere", "radius": 0.055,
             "motion": {"times": [0.0, 0.004, 0.028, 0.04],
                        "poses": [[0.26, 0.40, 0.50], [0.26, 0.40, 0.50],
                                  [0.23, 0.40, 0.50], [0.23, 0.40, 0.50]]}},
            {"shape": "sphere", "radius": 0.055,
             "motion": {"times": [0.0, 0.004, 0.028, 0.04],
                        "poses": [[0.54, 0.40, 0.50], [0.54, 0.40, 0.50],
                                  [0.57, 0.40, 0.50], [0.57, 0.40, 0.50]]}},
        ],
        "loss_weights": {"dist": 1.0, "track": 1.0, "mask": 0.0},
        "optimizer": {"method": "gradient", "lr": 1.0e-4,
                      "max_iterations": 300, "seed": 0,
                      "cma_population": 8, "cma_sigma0": 0.3,
                      "checkpoint_stride": 1},
    }


def squeeze_doc(*, plastic: bool = True) -> dict:
    """Squeeze-and-release scene: permanent dent vs elastic recovery.

    A free-floating block (no gravity, no ground) is squeezed along x by two
    mirrored spheres to ~33% strain - far past the plastic variant's elastic
    limit of ~8% - held, retracted slowly so the elastic variant unloads
    quasi-statically, and released 104 ms in; the remaining ~216 ms let the
    elastic variant settle back to its rest shape while the plastic variant
    keeps the dent. The mirrored motion and jitter-free lattice keep the net
    momentum at zero so the final cloud is compared against the initial shape
    in place.
    """
    times = [0.0, 0.004, 0.034, 0.044, 0.104, 0.32]
    left = [[0.27, 0.40, 0.40], [0.27, 0.40, 0.40], [0.29, 0.40, 0.40],
            [0.29, 0.40, 0.40], [0.27, 0.40, 0.40], [0.27, 0.40, 0.40]]
    right = [[0.53, 0.40, 0.40], [0.53, 0.40, 0.40], [0.51, 0.40, 0.40],
             [0.51, 0.40, 0.40], [0.53, 0.40, 0.40], [0.53, 0.40, 0.40]]
    return {
        "grid": {"origin": [0.0, 0.0, 0.0], "dx": 0.05, "dims": [16, 16, 16]},
        "dt": 2.0e-4,
        "substeps_per_frame": 20,
        "frames": 80,
        "gravity": [0.0, 0.0, 0.0],
        "material": {"E": 5.0e5, "nu": 0.3, "rho": 1000.0,
                     "y": 3.0e4 if plastic else "inf"},
        "particles": {"source": "box", "lo": [0.34, 0.34, 0.34],
                      "hi": [0.46, 0.46, 0.46], "spacing": 0.02,
                      "jitter": 0.0},
        "controllers": [
            {"shape": "sphere", "radius": 0.06, "active_until": 0.104,
             "motion": {"times": times, "poses": left}},
            {"shape": "sphere", "radius": 0.06, "active_until": 0.104,
             "motion": {"times": times, "poses": right}},
        ],
        "loss_weights": {"dist": 1.0, "track": 0.0, "mask": 0.0},
    }


def rope_doc() -> dict:
    """Streaming benchmark: a soft bar pinned at both ends, sagging and stretched.

    The twin starts ten times too stiff (E 5e5 vs the true 5e4). After a short
    hold the grippers pull apart slowly, then hold for half the stream; the
    sag of the span is the main modulus signal for the online corrector, with
    a side-view silhouette for the mask loss. The online block carries the
    streaming-correction settings (attempt cadence, lookahead substeps,
    quasi-static speed gate).
    """
    times = [0.0, 0.05, 0.35, 0.70]
    return {
        "grid": {"origin": [0.0, 0.0, 0.0], "dx": 0.05, "dims": [17, 16, 16]},
        "dt": 2.5e-4,
        "substeps_per_frame": 20,
        "frames": 140,
        "gravity": [0.0, 0.0, -9.81],
        "material": {"E": 5.0e5, "nu": 0.3, "rho": 1000.0, "y": "inf",
                     "frozen": ["nu", "rho"],
                     "bounds": {"E": [2.0e4, 2.0e6]}},
        "particles": {"source": "box", "lo": [0.25, 0.385, 0.50],
                      "hi": [0.55, 0.415, 0.53], "spacing": 0.015,
                      "jitter": 0.2, "seed": 3},
        "controllers": [
            {"shape": "sphere", "radius": 0.045,
             "motion": {"times": times,
                        "poses": [[0.26, 0.40, 0.515], [0.26, 0.40, 0.515],
                                  [0.24, 0.40, 0.515], [0.24, 0.40, 0.515]]}},
            {"shape": "sphere", "radius": 0.045,
             "motion": {"times": times,
                        "poses": [[0.54, 0.40, 0.515], [0.54, 0.40, 0.515],
                                  [0.56, 0.40, 0.515], [0.56, 0.40, 0.515]]}},
        ],
        "cameras": [{"position": [0.40, 1.05, 0.48], "target": [0.40, 0.40, 0.48],
                     "fx": 90.0, "fy": 90.0, "cx": 16.0, "cy": 16.0,
                     "width": 32, "height": 32}],
        "loss_weights": {"dist": 1.0, "track": 0.0, "mask": 1.0},
        "online": {"optimize_every": 5, "horizon": 10, "speed_threshold": 0.06,
                   "lr": 0.02, "iterations": 3, "checkpoint_stride": 5},
    }


def dough_doc() -> dict:
    """Streaming benchmark: an elastoplastic ball on the ground, poked twice.

    The twin starts five times too stiff (E 1e6 vs the true 2e5); Poisson's
    ratio, density and yield stress are shared and frozen. A sphere presses
    slowly into the ball - slow enough (indenter Mach number ~0.01) that the
    motion stays quasi-static and the corrector keeps working through contact,
    where the modulus signal is strongest - lifts, shifts sideways, pokes
    again, then parks for a final settle. A side-view camera supplies
    silhouettes.
    """
    z_up, z_dn = 0.30, 0.255
    times = [0.0, 0.04, 0.28, 0.34, 0.58, 0.62, 0.66, 0.90, 0.96, 1.20, 1.30]
    poses = [[0.40, 0.40, z_up], [0.40, 0.40, z_up], [0.40, 0.40, z_dn],
             [0.40, 0.40, z_dn], [0.40, 0.40, z_up], [0.43, 0.40, z_up],
             [0.43, 0.40, z_up], [0.43, 0.40, z_dn], [0.43, 0.40, z_dn],
             [0.43, 0.40, z_up], [0.43, 0.40, z_up]]
    return {
        "grid": {"origin": [0.0, 0.0, 0.0], "dx": 0.05, "dims": [16, 16, 12]},
        "dt": 2.0e-4,
        "substeps_per_frame": 25,
        "frames": 260,
        "gravity": [0.0, 0.0, -9.81],
        "ground": {"height": 0.12, "friction_mu": 0.4},
        "material": {"E": 1.0e6, "nu": 0.35, "rho": 1100.0, "y": 8.0e3,
                     "frozen": ["nu", "rho", "y"],
                     "bounds": {"E": [2.0e4, 3.0e6]}},
        "particles": {"source": "ball", "center": [0.40, 0.40, 0.20],
                      "radius": 0.065, "spacing": 0.02,
                      "jitter": 0.2, "seed": 4},
        "controllers": [{"shape": "sphere", "radius": 0.05,
                         "motion": {"times": times, "poses": poses}}],
        "cameras": [{"position": [0.40, 1.05, 0.22], "target": [0.40, 0.40, 0.20],
                     "fx": 80.0, "fy": 80.0, "cx": 16.0, "cy": 16.0,
                     "width": 32, "height": 32}],
        "loss_weights": {"dist": 1.0, "track": 0.0, "mask": 1.0},
        "online": {"optimize_every": 5, "horizon": 10, "speed_threshold": 0.25,
                   "lr": 0.02, "iterations": 3, "checkpoint_stride": 5},
    }

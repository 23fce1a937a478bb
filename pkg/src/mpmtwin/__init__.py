"""Differentiable material point method simulator with material identification."""

from .constitutive import (
    fixed_corotated_energy,
    fixed_corotated_stress,
    von_mises_return_map,
)
from .core import (
    CflWarning,
    Controller,
    GridField,
    GroundPlane,
    LossWeights,
    MaterialParams,
    MpmError,
    NumericalFault,
    ObservationFrame,
    ObservationSet,
    ParticleState,
    PinholeCamera,
    Scene,
    ValidationError,
    lame_from_params,
    look_at_camera,
    material_from_normalized,
    normalize_params,
    normalized_bounds,
    particles_from_ball,
    particles_from_box,
)
from .diff import evaluate_objective, finite_diff_grad, rollout_grad
from .identify import (
    IdentifyResult,
    OnlineConfig,
    OnlineResult,
    OptimizerConfig,
    identify_offline,
    online_loop,
)
from .kernel import (
    get_default_workers,
    rollout,
    set_default_workers,
    step,
)
from .loss import chamfer_distance, mask_loss, render_soft_masks, tracking_loss
from .sceneio import (
    LoadedScene,
    load_scene,
    read_observations,
    read_report,
    read_trajectory,
    save_scene,
    scene_from_doc,
    synth_generate,
    write_observations,
    write_report,
    write_trajectory,
)

__version__ = "0.1.0"

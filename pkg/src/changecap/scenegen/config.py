from __future__ import annotations

from dataclasses import dataclass

from ..kvconfig import ConfigError, load_kv


@dataclass
class GenConfig:
    """Generator settings; every field may appear in a key=value config file.

    Lengths are in scene units (the scene spans [0, 1) on both axes) unless
    the name says ``px``.
    """

    num_scenes: int = 100            # "before" scenes; the dataset holds twice as many pairs
    image_size: int = 64             # square raster side in pixels
    min_objects: int = 4             # objects per sampled "before" scene
    max_objects: int = 7
    margin: float = 0.1              # object centres stay in [margin, 1 - margin)
    large_side: float = 0.1875       # silhouette extent of large objects
    small_side: float = 0.125
    jitter_range: float = 2.0        # camera offsets drawn from U[-range, range]
    kappa_t: float = 2.0             # px of image translation per unit of dx, dy
    kappa_s: float = 0.04            # scale change per unit of dz
    kappa_b: float = 0.1             # brightness change per unit of dz
    move_floor: float = 2.0          # MOVE displacement >= move_floor * large-object radius
    captions_per_pair: int = 3
    split_train: float = 0.85
    split_val: float = 0.05
    split_test: float = 0.10
    placement_attempts: int = 200
    scene_attempts: int = 100
    jitter_attempts: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_scenes <= 0:
            raise ConfigError("num_scenes must be positive")
        if not 3 <= self.min_objects <= self.max_objects <= 8:
            raise ConfigError("object counts must satisfy 3 <= min_objects <= max_objects <= 8")
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        if not 0.0 <= self.margin < 0.5:
            raise ConfigError("margin must lie in [0, 0.5)")
        fracs = (self.split_train, self.split_val, self.split_test)
        if any(f <= 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError("split fractions must be positive and sum to 1")
        if self.captions_per_pair < 1:
            raise ConfigError("captions_per_pair must be >= 1")
        if self.jitter_range < 0:
            raise ConfigError("jitter_range must be >= 0")


def load_gen_config(path, **overrides):
    return load_kv(GenConfig, path, **overrides)

from .captions import (TEMPLATES, generate_caption, generate_captions, referring_expression,
                       resolve_referent, tokenize)
from .config import GenConfig, load_gen_config
from .dataset import (SamplePair, build_dataset, generate_pairs, generate_scene_pairs,
                      load_manifest, mean_box_iou, viewpoint_difficulty)
from .render import (BBox, CameraJitter, box_iou, jitter_camera, project_bbox, read_pnm,
                     render, silhouette_mask, write_pgm, write_ppm)
from .scene import (ALL_TYPES, COLORS, MATERIALS, SCENE_CHANGES, SHAPES, SIZES, ChangeRecord,
                    ChangeType, GenerationError, Scene, SceneObject, apply_change,
                    balanced_types, diff_scenes, sample_scene)

"""Procedural toy driving world: scenes, sensors, captions, dataset files."""
from .captions import PROMPT, caption, grammar_words, quantize
from .dataset import (Dataset, DatasetFormatError, FrameSample, build_sample, make_dataset, read_dataset,
                      scene_seeds, write_dataset)
from .scene import (BUILDING, CLASSES, VEHICLE, Box, GenerationError, SceneGraph, box_sdf, generate_scene,
                    scene_sdf, validate_scene)
from .sensors import (CameraSpec, LidarSpec, LidarSweep, ego_to_world, raycast, render_views, simulate_lidar,
                      world_to_ego)

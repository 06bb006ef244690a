from .cube import Annotation3D, FrameRecord, RadCube, rescale_annotations, resize_doppler
from .io import (
    load_frame,
    load_frames,
    read_labels,
    save_frame,
    save_frames,
    write_labels,
)
from .synth import SceneSpec, synth_frame
from .weights import ClassWeightConfig, compute_class_weights

__all__ = [
    "Annotation3D",
    "ClassWeightConfig",
    "FrameRecord",
    "RadCube",
    "SceneSpec",
    "compute_class_weights",
    "load_frame",
    "load_frames",
    "read_labels",
    "rescale_annotations",
    "resize_doppler",
    "save_frame",
    "save_frames",
    "synth_frame",
    "write_labels",
]

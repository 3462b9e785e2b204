"""Novel-view synthesis for scenes with a face.

Three cooperating parts: a time-conditioned neural radiance field rendered
by emission-absorption quadrature, a UV face-texture extraction/stitching/
rasterization path driven by externally fitted meshes, and a conditional
GAN that fuses the two renders into a detail-preserving output image.
"""

__version__ = "0.1.0"

from .encoding import EncodingSpec, encode
from .field import FieldConfig, RadianceField, init_params
from .geometry import Camera, DepthSamples, Ray, RayBundle, rays_for_pixels, stratified_sample
from .render import RayRadiance, composite, render_image, render_ray

__all__ = [
    "Camera",
    "DepthSamples",
    "EncodingSpec",
    "FieldConfig",
    "RadianceField",
    "Ray",
    "RayBundle",
    "RayRadiance",
    "composite",
    "encode",
    "init_params",
    "rays_for_pixels",
    "render_image",
    "render_ray",
    "stratified_sample",
]

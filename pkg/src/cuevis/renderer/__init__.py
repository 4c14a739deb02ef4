"""Neural-field generator: K-planes encoding, field MLPs, sampler and volume renderer."""
from cuevis.renderer.encoding import encode_direction, encode_position, sh_basis
from cuevis.renderer.field import DEFAULT_AABB, FieldParams, SamplePoint, field_eval, field_eval_points
from cuevis.renderer.generator import NERF_INTRINSICS, NeRFGenerator, load_generator, save_generator
from cuevis.renderer.pretrain import PretrainConfig, PretrainResult, heldout_psnr, photometric_pretrain, render_views
from cuevis.renderer.render import composite, mask_pixels, psnr, render_image, render_pixels, render_rays
from cuevis.renderer.sampler import SampleBatch, SamplerParams, ray_aabb, sample_ray, sample_rays

__all__ = [
    "DEFAULT_AABB",
    "FieldParams",
    "NERF_INTRINSICS",
    "NeRFGenerator",
    "PretrainConfig",
    "PretrainResult",
    "SampleBatch",
    "SamplePoint",
    "SamplerParams",
    "composite",
    "encode_direction",
    "encode_position",
    "field_eval",
    "field_eval_points",
    "heldout_psnr",
    "load_generator",
    "mask_pixels",
    "photometric_pretrain",
    "psnr",
    "ray_aabb",
    "render_image",
    "render_pixels",
    "render_rays",
    "render_views",
    "save_generator",
    "sample_ray",
    "sample_rays",
    "sh_basis",
]

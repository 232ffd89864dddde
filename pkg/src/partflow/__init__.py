"""Joint 3D particle reconstruction and dense flow estimation from multi-camera images."""
from .camera import Box, PinholeCamera, PolynomialCamera, camera_from_dict, fit_polynomial
from .motionfield import MotionGrid
from .scene import BlobKernel, ParticleSet
from .energy import EnergyParams, JointEnergy
from .pipeline import SolverConfig, reconstruct, reconstruct_flow, reconstruct_sequential
from .synth import AnalyticFlow, default_rig, generate

__all__ = [
    "AnalyticFlow", "BlobKernel", "Box", "EnergyParams", "JointEnergy", "MotionGrid",
    "ParticleSet", "PinholeCamera", "PolynomialCamera", "SolverConfig", "camera_from_dict",
    "default_rig", "fit_polynomial", "generate", "reconstruct", "reconstruct_flow",
    "reconstruct_sequential",
]

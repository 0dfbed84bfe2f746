"""
Algebra of the 3D latent keypoint representation.

    K = R Kc + T + E

Kc are identity-specific canonical keypoints, (R, T) the rigid head pose and
E the non-rigid expression deformation. Emotion is added on top of E as an
extra deformation, and E is coded with PCA for prediction.

Deformations are flattened row-major over (keypoint, axis), i.e. the 45-vector
is [x0, y0, z0, x1, y1, z1, ...]. The order is fixed so basis files are
portable. The numpy functions are the reference algebra; the `_t` variants are
batched torch equivalents used inside training graphs.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import torch

from eatlab.errors import InvalidPoseError, PcaFitError

NUM_KEYPOINTS = 15
FLAT_DIM = NUM_KEYPOINTS * 3
POSE_TOLERANCE = 1e-6


@dataclass(frozen=True)
class PoseParams:
    """Rigid head pose: rotation matrix and translation"""
    rotation: np.ndarray
    translation: np.ndarray

    def validate(self) -> "PoseParams":
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise InvalidPoseError(f"pose shapes {rot.shape}, {trans.shape}; expected (3, 3), (3,)")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise InvalidPoseError("pose contains non-finite values")
        ortho = np.max(np.abs(rot.T @ rot - np.eye(3)))
        if ortho >= POSE_TOLERANCE:
            raise InvalidPoseError(f"rotation is not orthonormal (|R^T R - I|_inf = {ortho:.3g})")
        if np.linalg.det(rot) <= 0:
            raise InvalidPoseError("rotation has negative determinant")
        return self

    @classmethod
    def identity(cls) -> "PoseParams":
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class PcaBasis:
    """Orthonormal basis U (45 x dim), mean M (45) and eigenvalues (dim, non-increasing)"""
    basis: np.ndarray
    mean: np.ndarray
    eigenvalues: np.ndarray

    @property
    def dim(self) -> int:
        return self.basis.shape[1]


def _check_points(points: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.shape != (NUM_KEYPOINTS, 3):
        raise ValueError(f"{what} must have shape ({NUM_KEYPOINTS}, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    return arr


def rotation_from_euler(angles: Sequence[float]) -> np.ndarray:
    """Rotation R = Rz(yaw) Ry(pitch) Rx(roll) from XYZ Euler angles in radians"""
    rx, ry, rz = (float(a) for a in angles)
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mat_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    mat_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mat_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mat_z @ mat_y @ mat_x


def euler_from_rotation(rotation: np.ndarray) -> np.ndarray:
    """Inverse of rotation_from_euler away from gimbal lock"""
    r = np.asarray(rotation, dtype=np.float64)
    ry = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    rx = np.arctan2(r[2, 1], r[2, 2])
    rz = np.arctan2(r[1, 0], r[0, 0])
    return np.array([rx, ry, rz])


def pose_from_vector(vec: Sequence[float]) -> PoseParams:
    """PoseParams from a 6-vector (3 Euler angles in radians, 3 translation)"""
    v = np.asarray(vec, dtype=np.float64)
    return PoseParams(rotation_from_euler(v[:3]), v[3:6].copy()).validate()


def pose_to_vector(pose: PoseParams) -> np.ndarray:
    """6-vector encoding of a pose; this is what the pose encoders consume"""
    return np.concatenate([euler_from_rotation(pose.rotation), np.asarray(pose.translation, dtype=np.float64)])


def compose_keypoints(canonical: np.ndarray, pose: PoseParams, expr: np.ndarray) -> np.ndarray:
    """K = (R Kc^T)^T + T + E"""
    kc = _check_points(canonical, "canonical keypoints")
    e = _check_points(expr, "expression deformation")
    pose.validate()
    return kc @ np.asarray(pose.rotation, dtype=np.float64).T + np.asarray(pose.translation)[None, :] + e


def decompose_expression(keypoints: np.ndarray, canonical: np.ndarray, pose: PoseParams) -> np.ndarray:
    """E = K - (R Kc^T)^T - T, the algebraic inverse of compose_keypoints"""
    k = _check_points(keypoints, "keypoints")
    kc = _check_points(canonical, "canonical keypoints")
    pose.validate()
    return k - kc @ np.asarray(pose.rotation, dtype=np.float64).T - np.asarray(pose.translation)[None, :]


def add_emotional_deformation(speech_expr: np.ndarray, emo_expr: np.ndarray) -> np.ndarray:
    """E' = E + dE"""
    return _check_points(speech_expr, "speech deformation") + _check_points(emo_expr, "emotional deformation")


def flatten_deformation(expr: np.ndarray) -> np.ndarray:
    return np.asarray(expr).reshape(-1, FLAT_DIM) if np.ndim(expr) > 2 else np.asarray(expr).reshape(FLAT_DIM)


def unflatten_deformation(flat: np.ndarray) -> np.ndarray:
    flat = np.asarray(flat)
    return flat.reshape(flat.shape[:-1] + (NUM_KEYPOINTS, 3))


def pca_fit(deformations: Sequence[np.ndarray], dim: int = 32) -> PcaBasis:
    """
    Fit a PCA basis by SVD of the mean-centred, flattened deformations.

    Args:
        deformations: Sequence (or array) of (15, 3) deformations
        dim: Number of components, at most 45

    Returns:
        Basis with orthonormal columns, sign fixed so each column's
        largest-magnitude entry is positive
    """
    data = np.asarray(deformations, dtype=np.float64).reshape(-1, FLAT_DIM)
    if not 1 <= dim <= FLAT_DIM:
        raise PcaFitError(f"dim must be in [1, {FLAT_DIM}], got {dim}")
    if data.shape[0] < dim:
        raise PcaFitError(f"need at least {dim} samples, got {data.shape[0]}")
    if data.shape[0] < 2:
        raise PcaFitError("need at least 2 samples")
    mean = data.mean(axis=0)
    centered = data - mean
    _, sing, vt = np.linalg.svd(centered, full_matrices=True)
    basis = vt[:dim].T.copy()
    sing_full = np.zeros(FLAT_DIM)
    sing_full[: sing.shape[0]] = sing
    eig = sing_full[:dim] ** 2 / (data.shape[0] - 1)
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(dim)])
    signs[signs == 0] = 1.0
    basis *= signs[None, :]
    return PcaBasis(basis=basis, mean=mean, eigenvalues=eig)


def pca_project(expr: np.ndarray, basis: PcaBasis) -> np.ndarray:
    """coeffs = (flatten(E) - M) U; accepts one deformation or a stack"""
    flat = np.asarray(expr, dtype=np.float64).reshape(-1, FLAT_DIM)
    coeffs = (flat - basis.mean[None, :]) @ basis.basis
    return coeffs[0] if np.ndim(expr) == 2 else coeffs


def pca_reconstruct(code: np.ndarray, basis: PcaBasis) -> np.ndarray:
    """E = PE U^T + M reshaped to (15, 3); accepts one code or a stack"""
    code = np.asarray(code, dtype=np.float64)
    flat = code @ basis.basis.T + basis.mean
    return unflatten_deformation(flat)


def basis_arrays(basis: PcaBasis) -> dict:
    return {
        "U": basis.basis.astype(np.float32),
        "M": basis.mean.astype(np.float32),
        "eig": basis.eigenvalues.astype(np.float32),
    }


def basis_from_arrays(arrays: dict) -> PcaBasis:
    return PcaBasis(
        basis=np.asarray(arrays["U"], dtype=np.float64),
        mean=np.asarray(arrays["M"], dtype=np.float64),
        eigenvalues=np.asarray(arrays["eig"], dtype=np.float64),
    )


# Batched torch counterparts. Shapes: canonical (..., 15, 3), rotation (..., 3, 3),
# translation (..., 3), expr (..., 15, 3).

def compose_keypoints_t(
    canonical: torch.Tensor, rotation: torch.Tensor, translation: torch.Tensor, expr: torch.Tensor
) -> torch.Tensor:
    return canonical @ rotation.transpose(-1, -2) + translation.unsqueeze(-2) + expr


def decompose_expression_t(
    keypoints: torch.Tensor, canonical: torch.Tensor, rotation: torch.Tensor, translation: torch.Tensor
) -> torch.Tensor:
    return keypoints - canonical @ rotation.transpose(-1, -2) - translation.unsqueeze(-2)


def pca_project_t(expr: torch.Tensor, basis_u: torch.Tensor, mean: torch.Tensor) -> torch.Tensor:
    flat = expr.reshape(expr.shape[:-2] + (FLAT_DIM,))
    return (flat - mean) @ basis_u


def pca_reconstruct_t(code: torch.Tensor, basis_u: torch.Tensor, mean: torch.Tensor) -> torch.Tensor:
    flat = code @ basis_u.transpose(0, 1) + mean
    return flat.reshape(flat.shape[:-1] + (NUM_KEYPOINTS, 3))


def rotation_from_euler_t(angles: torch.Tensor) -> torch.Tensor:
    """Batched rotation_from_euler; angles (..., 3)"""
    rx, ry, rz = angles.unbind(-1)
    cx, sx, cy, sy, cz, sz = rx.cos(), rx.sin(), ry.cos(), ry.sin(), rz.cos(), rz.sin()
    one, zero = torch.ones_like(rx), torch.zeros_like(rx)
    mat_x = torch.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(angles.shape[:-1] + (3, 3))
    mat_y = torch.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(angles.shape[:-1] + (3, 3))
    mat_z = torch.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(angles.shape[:-1] + (3, 3))
    return mat_z @ mat_y @ mat_x


def split_pose_vector_t(pose_vec: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(..., 6) pose vectors to (rotation (..., 3, 3), translation (..., 3))"""
    return rotation_from_euler_t(pose_vec[..., :3]), pose_vec[..., 3:6]

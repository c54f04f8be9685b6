"""Intra-sequence lifting of query keypoints to 3D.

For each query frame, a forward neighbor with enough relative displacement is
selected from the same sequence; shared keypoints are triangulated in the
query odometry frame and joined with query-to-reference matches into 3D-2D
correspondences.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose, project, rotation_half_angle
from .ingest import Frame
from .matching import MatchSet


def select_neighbors(poses: list[Pose], t_min: float, theta_min_rad: float) -> list[int | None]:
    """First j > i whose relative displacement passes the threshold test.

    The rotation test uses the quaternion half-angle of the relative rotation,
    so theta_min is compared against half the geodesic angle. Frames with no
    qualifying forward neighbor map to None and are skipped downstream.
    """
    n = len(poses)
    out: list[int | None] = [None] * n
    for i in range(n):
        inv_i = poses[i].inverse()
        for j in range(i + 1, n):
            rel = inv_i.compose(poses[j])
            if (
                np.linalg.norm(rel.translation) >= t_min
                or rotation_half_angle(rel.rotation) >= theta_min_rad
            ):
                out[i] = j
                break
    return out


class Reject(str, enum.Enum):
    BEHIND_CAMERA = "behind_camera"
    REPROJ_TOO_LARGE = "reproj_too_large"
    ANGLE_TOO_SMALL = "angle_too_small"
    DEGENERATE_RAYS = "degenerate_rays"


@dataclass
class TriangulationResult:
    point: np.ndarray | None
    reproj_a: float = math.inf
    reproj_b: float = math.inf
    reject: Reject | None = None

    @property
    def ok(self) -> bool:
        return self.reject is None


@dataclass
class LiftedPoint:
    """A query keypoint lifted to the query odometry frame."""

    kp_idx: int
    point: np.ndarray  # 3-vector in frame q
    reproj_a: float
    reproj_b: float


@dataclass
class Corr3D2D:
    """Triangulated query point paired with a reference observation."""

    point: np.ndarray  # in the query odometry frame q
    ref_frame_id: str
    ref_pixel: np.ndarray
    query_kp_idx: int
    ref_kp_idx: int


def triangulate_pair(
    T_a: Pose,
    T_b: Pose,
    K_a: CameraIntrinsics,
    K_b: CameraIntrinsics,
    pix_a,
    pix_b,
    max_reproj_px: float = 3.0,
    min_angle_deg: float = 1.0,
) -> TriangulationResult:
    """DLT plus one Gauss-Newton reprojection step; poses are T(q<-cam).

    Accepts only points with positive depth in both views, both reprojection
    errors within max_reproj_px and a triangulation angle of at least
    min_angle_deg.
    """
    pix_a = np.asarray(pix_a, dtype=float)
    pix_b = np.asarray(pix_b, dtype=float)
    cam_a = T_a.inverse()  # T(cam<-q)
    cam_b = T_b.inverse()
    center_a = T_a.translation
    center_b = T_b.translation
    if np.linalg.norm(center_a - center_b) < 1e-9:
        return TriangulationResult(None, reject=Reject.DEGENERATE_RAYS)

    P_a = K_a.K @ cam_a.matrix[:3, :]
    P_b = K_b.K @ cam_b.matrix[:3, :]
    A = np.vstack(
        [
            pix_a[0] * P_a[2] - P_a[0],
            pix_a[1] * P_a[2] - P_a[1],
            pix_b[0] * P_b[2] - P_b[0],
            pix_b[1] * P_b[2] - P_b[1],
        ]
    )
    _, _, vt = np.linalg.svd(A)
    Xh = vt[-1]
    if abs(Xh[3]) < 1e-12:
        return TriangulationResult(None, reject=Reject.DEGENERATE_RAYS)
    X = Xh[:3] / Xh[3]

    X = _gauss_newton_step(X, [(cam_a, K_a, pix_a), (cam_b, K_b, pix_b)])

    za = cam_a.apply(X)[2]
    zb = cam_b.apply(X)[2]
    if za <= 1e-9 or zb <= 1e-9:
        return TriangulationResult(None, reject=Reject.BEHIND_CAMERA)
    ra = float(np.linalg.norm(project(K_a, cam_a, X) - pix_a))
    rb = float(np.linalg.norm(project(K_b, cam_b, X) - pix_b))
    if ra > max_reproj_px or rb > max_reproj_px:
        return TriangulationResult(None, reproj_a=ra, reproj_b=rb, reject=Reject.REPROJ_TOO_LARGE)

    da = X - center_a
    db = X - center_b
    cosang = np.dot(da, db) / (np.linalg.norm(da) * np.linalg.norm(db))
    angle = math.degrees(math.acos(np.clip(cosang, -1.0, 1.0)))
    if angle < min_angle_deg:
        return TriangulationResult(None, reproj_a=ra, reproj_b=rb, reject=Reject.ANGLE_TOO_SMALL)
    return TriangulationResult(point=X, reproj_a=ra, reproj_b=rb)


def _gauss_newton_step(X: np.ndarray, views) -> np.ndarray:
    """One reprojection Gauss-Newton step over the point; keeps X on failure."""
    J = np.zeros((2 * len(views), 3))
    r = np.zeros(2 * len(views))
    for v, (cam, K, pix) in enumerate(views):
        pc = cam.apply(X)
        if pc[2] <= 1e-9:
            return X
        u = K.fx * pc[0] / pc[2] + K.cx
        w = K.fy * pc[1] / pc[2] + K.cy
        r[2 * v : 2 * v + 2] = (u - pix[0], w - pix[1])
        J_pi = np.array(
            [
                [K.fx / pc[2], 0.0, -K.fx * pc[0] / pc[2] ** 2],
                [0.0, K.fy / pc[2], -K.fy * pc[1] / pc[2] ** 2],
            ]
        )
        J[2 * v : 2 * v + 2] = J_pi @ cam.rotation.matrix
    H = J.T @ J
    try:
        delta = np.linalg.solve(H, -J.T @ r)
    except np.linalg.LinAlgError:
        return X
    if not np.all(np.isfinite(delta)):
        return X
    return X + delta


def triangulate_matches(
    ms: MatchSet,
    T_a: Pose,
    T_b: Pose,
    K_a: CameraIntrinsics,
    K_b: CameraIntrinsics,
    kps_a: np.ndarray,
    kps_b: np.ndarray,
    max_reproj_px: float = 3.0,
    min_angle_deg: float = 1.0,
) -> list[LiftedPoint]:
    """Triangulate every accepted match of a frame pair; poses are T(q<-cam)."""
    lifted = []
    for ia, ib in zip(ms.idx_a, ms.idx_b):
        res = triangulate_pair(
            T_a, T_b, K_a, K_b, kps_a[ia], kps_b[ib],
            max_reproj_px=max_reproj_px, min_angle_deg=min_angle_deg,
        )
        if res.ok:
            lifted.append(
                LiftedPoint(kp_idx=int(ia), point=res.point,
                            reproj_a=res.reproj_a, reproj_b=res.reproj_b)
            )
    return lifted


def assemble_3d2d(
    lifted: list[LiftedPoint],
    candidate_matches: list[tuple[MatchSet, Frame]],
) -> list[Corr3D2D]:
    """Join lifted query keypoints with query-to-reference matches.

    candidate_matches pair each MatchSet (frame a = the query frame) with its
    reference Frame; the union over all candidates is returned, duplicates
    across candidates retained.
    """
    by_idx = {lp.kp_idx: lp for lp in lifted}
    rows: list[Corr3D2D] = []
    for ms, ref in candidate_matches:
        for ia, ib in zip(ms.idx_a, ms.idx_b):
            lp = by_idx.get(int(ia))
            if lp is None:
                continue
            rows.append(
                Corr3D2D(
                    point=lp.point,
                    ref_frame_id=ref.frame_id,
                    ref_pixel=np.asarray(ref.keypoints[int(ib)], dtype=float),
                    query_kp_idx=int(ia),
                    ref_kp_idx=int(ib),
                )
            )
    return rows

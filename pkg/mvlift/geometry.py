# -*- coding: utf-8 -*-
"""Pinhole cameras, circular rigs, epipolar lines, triangulation and Procrustes alignment.

Conventions
-----------
The world frame is z-up. A `CameraPose` maps world points to camera
coordinates with ``X_cam = R X_world + t``; cameras look along +z with x to
the right and y down. Image points live in the normalized [-1, 1] frame used
by `mvlift.motion`, i.e. ``u = fx * X_cam[0] / X_cam[2] + cx``.

Points are plain numpy arrays: a Point2D is shape (2,), a Point3D shape (3,),
a LineSet is shape (..., 3) with normalized coefficients.
"""
import collections
import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from mvlift.base import (LINE_EPS, GUARD_RADIUS, InvalidArgumentError, DegenerateGeometryError,
                         BehindCameraError, InsufficientViewsError)

logger = logging.getLogger(__name__)

DEFAULT_RADIUS = 3.0
DEFAULT_HEIGHT = 0.0
DEFAULT_FOCAL = 1.2

DLT_CONDITION_LIMIT = 1e12
"""float: DLT systems worse conditioned than this are treated as parallel rays"""

Triangulation = collections.namedtuple('Triangulation', ['point', 'residual'])
"""Result of `triangulate`: the 3D point and its total squared reprojection error"""


@dataclass(frozen=True)
class CameraIntrinsics(object):
    """Shared pinhole intrinsics in normalized-image units."""
    fx: float = DEFAULT_FOCAL
    fy: float = DEFAULT_FOCAL
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive, got fx={} fy={}".format(self.fx, self.fy))

    @property
    def matrix(self):
        """The 3x3 calibration matrix K."""
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def inverse(self):
        """K^-1 in closed form."""
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraPose(object):
    """World-to-camera rotation and translation."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=float).reshape(3, 3)
        translation = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise InvalidArgumentError("camera pose must be finite")
        if (np.max(np.abs(rotation @ rotation.T - np.eye(3))) > 1e-9
                or abs(np.linalg.det(rotation) - 1.0) > 1e-9):
            raise InvalidArgumentError("rotation is not a proper orthogonal matrix")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    @property
    def center(self):
        """Optical center in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
        """Camera at `center` whose optical axis points at `target`."""
        center = np.asarray(center, dtype=float)
        forward = np.asarray(target, dtype=float) - center
        norm = np.linalg.norm(forward)
        if norm < LINE_EPS:
            raise DegenerateGeometryError("camera center coincides with its target")
        forward = forward / norm
        right = np.cross(forward, np.asarray(up, dtype=float))
        norm = np.linalg.norm(right)
        if norm < LINE_EPS:
            raise DegenerateGeometryError("viewing direction is parallel to the up vector")
        right = right / norm
        down = np.cross(forward, right)
        rotation = np.vstack([right, down, forward])
        return cls(rotation, -rotation @ center)


@dataclass(frozen=True)
class Line2D(object):
    """Image line a*x + b*y + c = 0, normalized so that a^2 + b^2 = 1."""
    a: float
    b: float
    c: float

    def __post_init__(self):
        norm = math.hypot(self.a, self.b)
        if not (np.isfinite(norm) and np.isfinite(self.c)) or norm < LINE_EPS:
            raise DegenerateGeometryError("degenerate line ({}, {}, {})".format(self.a, self.b, self.c))
        object.__setattr__(self, 'a', float(self.a) / norm)
        object.__setattr__(self, 'b', float(self.b) / norm)
        object.__setattr__(self, 'c', float(self.c) / norm)

    @property
    def coefficients(self):
        return np.array([self.a, self.b, self.c])

    def distance(self, point):
        """Perpendicular distance from `point` to the line."""
        x, y = np.asarray(point, dtype=float)[:2]
        return abs(self.a * x + self.b * y + self.c)


SimilarityTransform = collections.namedtuple('SimilarityTransform', ['rotation', 'translation', 'scale', 'residual'])
"""Least-squares similarity B ~ scale * R A + t; `residual` is the RMS point distance after alignment"""


def apply_similarity(transform, points):
    """Apply a `SimilarityTransform` to points of shape (..., 3)."""
    points = np.asarray(points, dtype=float)
    return transform.scale * points @ transform.rotation.T + transform.translation


def skew(v):
    """Return the cross-product matrix [v]_x."""
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def homogeneous(points):
    """Append a trailing 1 to points of shape (..., 2)."""
    points = np.asarray(points, dtype=float)
    return np.concatenate([points, np.ones(points.shape[:-1] + (1,))], axis=-1)


def relative_pose(pose_v, pose_w):
    """Rotation and translation taking camera-v coordinates to camera-w coordinates."""
    rotation = pose_w.rotation @ pose_v.rotation.T
    translation = pose_w.translation - rotation @ pose_v.translation
    return rotation, translation


def essential_matrix(pose_v, pose_w):
    """E = [t_rel]_x R_rel, so that x_w^T E x_v = 0 for calibrated correspondences."""
    rotation, translation = relative_pose(pose_v, pose_w)
    return skew(translation) @ rotation


def fundamental_matrix(K, E):
    """F = K^-T E K^-1.

    Parameters
    ----------
    K : CameraIntrinsics or array-like
        Calibration, as intrinsics or as a 3x3 matrix.
    E : array-like
        Essential matrix.
    """
    K_inv = K.inverse if isinstance(K, CameraIntrinsics) else np.linalg.inv(np.asarray(K, dtype=float))
    return K_inv.T @ np.asarray(E, dtype=float) @ K_inv


def normalize_lines(lines):
    """Rescale line coefficients (..., 3) so that a^2 + b^2 = 1."""
    lines = np.asarray(lines, dtype=float)
    norm = np.hypot(lines[..., 0], lines[..., 1])
    bad = ~(norm >= LINE_EPS)
    if np.any(bad):
        index = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DegenerateGeometryError("degenerate line at index {}".format(index))
    return lines / norm[..., None]


def point_line_distance(points, lines):
    """Perpendicular distances |a x + b y + c| for normalized lines, elementwise over (...)."""
    points = np.asarray(points, dtype=float)
    lines = np.asarray(lines, dtype=float)
    return np.abs(lines[..., 0] * points[..., 0] + lines[..., 1] * points[..., 1] + lines[..., 2])


def epipolar_line(F, p):
    """Epipolar line l = F (p, 1) of the image point `p`, as a normalized `Line2D`."""
    line = np.asarray(F, dtype=float) @ homogeneous(p)
    if math.hypot(line[0], line[1]) < LINE_EPS:
        raise DegenerateGeometryError("point {} is the epipole, its epipolar line is undefined".format(tuple(p)))
    return Line2D(*line)


def epipolar_lines(F, points):
    """Vectorized `epipolar_line`: points (..., 2) -> normalized lines (..., 3)."""
    return normalize_lines(homogeneous(points) @ np.asarray(F, dtype=float).T)


def sample_virtual_epipole(rng, bounds, joints=None, guard=GUARD_RADIUS, max_attempts=1000):
    """Draw a virtual epipole uniformly in `bounds`, away from every joint.

    Parameters
    ----------
    rng : numpy.random.Generator
        Seeded random source.
    bounds : tuple
        ``(xmin, ymin, xmax, ymax)`` in normalized image coordinates.
    joints : array-like, optional
        Joint positions (..., 2) of the sequence the epipole will serve.
    guard : float
        Radius of the excluded disc around every joint.

    Returns
    -------
    numpy.ndarray
        The epipole, shape (2,).
    """
    xmin, ymin, xmax, ymax = [float(b) for b in bounds]
    if not (xmin <= xmax and ymin <= ymax):
        raise InvalidArgumentError("empty epipole bounds {}".format(bounds))
    points = None if joints is None else np.asarray(joints, dtype=float).reshape(-1, 2)
    for _ in range(max_attempts):
        candidate = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)])
        if points is None or len(points) == 0 or np.min(np.linalg.norm(points - candidate, axis=1)) >= guard:
            return candidate
    raise DegenerateGeometryError("no admissible virtual epipole after {} attempts".format(max_attempts))


def lines_to_epipole(seq, e):
    """Lines through every joint of `seq` (..., 2) and the epipole `e`, normalized."""
    points = homogeneous(np.asarray(seq, dtype=float))
    epipole = homogeneous(np.asarray(e, dtype=float).reshape(2))
    lines = np.cross(points, epipole)
    try:
        return normalize_lines(lines)
    except DegenerateGeometryError:
        raise DegenerateGeometryError("a joint coincides with the epipole {}".format(tuple(epipole[:2])))


def project_points(points, rig, view):
    """Perspective projection of world points (..., 3) into `view` of `rig`.

    Raises
    ------
    BehindCameraError
        If any point has non-positive depth. For (T, J, 3) input the error
        carries the frame and joint index.
    """
    points = np.asarray(points, dtype=float)
    pose = rig.views[view]
    intrinsics = rig.intrinsics
    camera = points @ pose.rotation.T + pose.translation
    depth = camera[..., 2]
    bad = ~(depth > 0)
    if np.any(bad):
        index = tuple(int(i) for i in np.argwhere(bad)[0])
        frame, joint = (index[0], index[1]) if len(index) == 2 else (None, None)
        raise BehindCameraError("point {} has depth {:.6g} in view {}".format(index, depth[index] if index else float(depth), view),
                                view=view, frame=frame, joint=joint)
    u = intrinsics.fx * camera[..., 0] / depth + intrinsics.cx
    v = intrinsics.fy * camera[..., 1] / depth + intrinsics.cy
    return np.stack([u, v], axis=-1)


def project(p, rig, view):
    """Project a single Point3D into `view`."""
    return project_points(np.asarray(p, dtype=float).reshape(3), rig, view)


def project_with_jacobian(points, pose, intrinsics):
    """Project points (N, 3) and return (uv (N, 2), d uv / d X (N, 2, 3), depth (N,)).

    No depth check is made; callers decide how to treat non-positive depth.
    """
    camera = points @ pose.rotation.T + pose.translation
    depth = camera[:, 2]
    x = camera[:, 0] / depth
    y = camera[:, 1] / depth
    uv = np.stack([intrinsics.fx * x + intrinsics.cx, intrinsics.fy * y + intrinsics.cy], axis=-1)
    rows = pose.rotation
    du = intrinsics.fx * (rows[0][None, :] - x[:, None] * rows[2][None, :]) / depth[:, None]
    dv = intrinsics.fy * (rows[1][None, :] - y[:, None] * rows[2][None, :]) / depth[:, None]
    return uv, np.stack([du, dv], axis=1), depth


class CameraRig(object):
    """Shared intrinsics, ordered camera poses and every pairwise epipolar matrix.

    Attributes
    ----------
    intrinsics : CameraIntrinsics
    views : tuple of CameraPose
    essential : dict
        ``(v, w) -> E`` for every ordered pair of distinct views.
    fundamental : dict
        ``(v, w) -> F``; ``x_w^T F x_v = 0`` for corresponding image points.
    layout : dict or None
        Circular layout parameters (n_views, angle_step_deg, radius, height)
        when the rig was built by `build_circular_rig`.
    """

    def __init__(self, intrinsics, views, layout=None):
        self.intrinsics = intrinsics
        self.views = tuple(views)
        self.layout = layout
        self.essential = {}
        self.fundamental = {}
        for v, w in itertools.permutations(range(len(self.views)), 2):
            E = essential_matrix(self.views[v], self.views[w])
            self.essential[(v, w)] = E
            self.fundamental[(v, w)] = fundamental_matrix(intrinsics, E)

    @property
    def n_views(self):
        return len(self.views)

    def projection_matrix(self, view):
        """3x4 matrix K [R | t] of `view`."""
        pose = self.views[view]
        return self.intrinsics.matrix @ np.hstack([pose.rotation, pose.translation[:, None]])

    def epipole(self, v, w):
        """Image in view `w` of camera `v`'s center (the point every line F(v, w) x passes through)."""
        u, _, _ = np.linalg.svd(self.fundamental[(v, w)])
        e = u[:, -1]
        if abs(e[2]) < LINE_EPS:
            raise DegenerateGeometryError("epipole of views ({}, {}) is at infinity".format(v, w))
        return e[:2] / e[2]

    def subset(self, views):
        """Rig restricted to `views`, in the given order."""
        views = list(views)
        layout = None
        if self.layout is not None:
            layout = dict(self.layout, subset=tuple(views))
        return CameraRig(self.intrinsics, [self.views[v] for v in views], layout=layout)

    def to_text(self):
        """Serialize the rig as a key-value document; derived matrices are not written."""
        if self.layout is None or 'subset' in self.layout:
            raise InvalidArgumentError("only rigs built by build_circular_rig can be serialized")
        items = [('n_views', self.layout['n_views']),
                 ('angle_step_deg', self.layout['angle_step_deg']),
                 ('radius', self.layout['radius']),
                 ('height', self.layout['height']),
                 ('fx', self.intrinsics.fx),
                 ('fy', self.intrinsics.fy),
                 ('cx', self.intrinsics.cx),
                 ('cy', self.intrinsics.cy)]
        return '# mvlift camera rig\n' + ''.join('{} = {!r}\n'.format(k, v) for k, v in items)

    @classmethod
    def from_text(cls, text):
        """Parse a document written by `to_text` and rebuild every derived matrix."""
        values = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise InvalidArgumentError("rig line {}: expected 'key = value', got {!r}".format(number, raw))
            key, value = [part.strip() for part in line.split('=', 1)]
            try:
                values[key] = float(value)
            except ValueError:
                raise InvalidArgumentError("rig line {}: {!r} is not a number".format(number, value))
        missing = [k for k in ('n_views', 'angle_step_deg', 'radius', 'height', 'fx', 'fy', 'cx', 'cy') if k not in values]
        if missing:
            raise InvalidArgumentError("rig document misses keys: {}".format(', '.join(missing)))
        intrinsics = CameraIntrinsics(values['fx'], values['fy'], values['cx'], values['cy'])
        return build_circular_rig(int(values['n_views']), values['angle_step_deg'], values['radius'],
                                  values['height'], intrinsics)


def build_circular_rig(n_views, angle_step, radius=DEFAULT_RADIUS, height=DEFAULT_HEIGHT, intrinsics=None):
    """Cameras on a circle around the world origin, all looking at the origin.

    View k sits at azimuth ``k * angle_step`` degrees, so view 0 is at angle 0.

    Parameters
    ----------
    n_views : int
        Number of cameras (at least 1).
    angle_step : float
        Azimuth between consecutive cameras, in degrees.
    radius : float
        Distance of every optical center from the vertical axis.
    height : float
        z coordinate of every optical center.
    intrinsics : CameraIntrinsics, optional
        Defaults to fx = fy = 1.2, cx = cy = 0.

    Returns
    -------
    CameraRig
    """
    if int(n_views) != n_views or n_views < 1:
        raise InvalidArgumentError("a rig needs at least one view, got {}".format(n_views))
    if not radius > 0:
        raise InvalidArgumentError("rig radius must be positive, got {}".format(radius))
    intrinsics = intrinsics or CameraIntrinsics()
    poses = []
    for k in range(int(n_views)):
        theta = math.radians(k * angle_step)
        center = (radius * math.cos(theta), radius * math.sin(theta), height)
        poses.append(CameraPose.look_at(center))
    layout = {'n_views': int(n_views), 'angle_step_deg': float(angle_step),
              'radius': float(radius), 'height': float(height)}
    return CameraRig(intrinsics, poses, layout=layout)


_RIG_MEMO = {}


def cached_rig(n_views, angle_step, radius=DEFAULT_RADIUS, height=DEFAULT_HEIGHT, intrinsics=None):
    """`build_circular_rig` memoized on its arguments.

    The result is cached in a global variable to avoid recomputing the
    pairwise matrices for every sequence of a run.
    """
    intrinsics = intrinsics or CameraIntrinsics()
    key = (int(n_views), float(angle_step), float(radius), float(height), intrinsics)
    if key not in _RIG_MEMO:
        _RIG_MEMO[key] = build_circular_rig(n_views, angle_step, radius, height, intrinsics)
    return _RIG_MEMO[key]


def clear_cache():
    """Clear the rig cache stored as a global variable"""
    global _RIG_MEMO
    _RIG_MEMO = {}


def save_rig(path, rig):
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(rig.to_text())


def load_rig(path):
    with open(path, 'r', encoding='utf-8') as handle:
        return CameraRig.from_text(handle.read())


def dlt_points(observations, projections):
    """Linear triangulation of many points at once.

    Parameters
    ----------
    observations : numpy.ndarray
        Image points, shape (V, N, 2).
    projections : numpy.ndarray
        Projection matrices, shape (V, 3, 4).

    Returns
    -------
    numpy.ndarray
        Points, shape (N, 3).

    Raises
    ------
    DegenerateGeometryError
        When the rays of a point are (nearly) parallel.
    """
    observations = np.asarray(observations, dtype=float)
    projections = np.asarray(projections, dtype=float)
    x = observations[..., 0:1]
    y = observations[..., 1:2]
    # (V, N, 4) rows: x P3 - P1 and y P3 - P2
    rows_x = x * projections[:, None, 2, :] - projections[:, None, 0, :]
    rows_y = y * projections[:, None, 2, :] - projections[:, None, 1, :]
    system = np.concatenate([rows_x, rows_y], axis=0).transpose(1, 0, 2)
    _, singular, vt = np.linalg.svd(system)
    with np.errstate(divide='ignore'):
        condition = singular[:, 0] / singular[:, -2]
    bad = ~(condition <= DLT_CONDITION_LIMIT)
    if np.any(bad):
        index = int(np.argmax(bad))
        raise DegenerateGeometryError("near-parallel rays for point {} (condition {:.3g})".format(index, condition[index]))
    solution = vt[:, -1, :]
    w = solution[:, 3]
    if np.any(np.abs(w) < LINE_EPS * np.linalg.norm(solution, axis=1)):
        raise DegenerateGeometryError("triangulated point at infinity")
    return solution[:, :3] / w[:, None]


def _reprojection_cost(point, observed, poses, intrinsics):
    total = 0.0
    for uv_obs, pose in zip(observed, poses):
        uv, _, depth = project_with_jacobian(point[None, :], pose, intrinsics)
        if not depth[0] > 0:
            return np.inf
        total += float(np.sum((uv[0] - uv_obs) ** 2))
    return total


def triangulate(observations, rig, max_iterations=20, tolerance=1e-10):
    """Recover a 3D point from its projections in two or more views.

    The DLT solution is refined by Gauss-Newton on the squared reprojection
    error, halving the step whenever the error would grow.

    Parameters
    ----------
    observations : dict
        ``view index -> Point2D``.
    rig : CameraRig
    max_iterations : int
        Gauss-Newton iteration cap.
    tolerance : float
        Stop once the step norm drops below this value.

    Returns
    -------
    Triangulation
        ``(point, residual)`` with the total squared reprojection error.
    """
    views = sorted(observations)
    if len(views) < 2:
        raise InsufficientViewsError("triangulation needs at least 2 views, got {}".format(len(views)))
    observed = np.array([np.asarray(observations[v], dtype=float).reshape(2) for v in views])
    poses = [rig.views[v] for v in views]
    projections = np.array([rig.projection_matrix(v) for v in views])
    point = dlt_points(observed[:, None, :], projections)[0]

    cost = _reprojection_cost(point, observed, poses, rig.intrinsics)
    if not np.isfinite(cost):
        raise DegenerateGeometryError("triangulated point lies behind a camera")
    for _ in range(max_iterations):
        residuals = []
        jacobians = []
        for uv_obs, pose in zip(observed, poses):
            uv, jac, _ = project_with_jacobian(point[None, :], pose, rig.intrinsics)
            residuals.append(uv[0] - uv_obs)
            jacobians.append(jac[0])
        step = np.linalg.lstsq(np.vstack(jacobians), -np.concatenate(residuals), rcond=None)[0]
        scale = 1.0
        while True:
            candidate = point + scale * step
            candidate_cost = _reprojection_cost(candidate, observed, poses, rig.intrinsics)
            if candidate_cost <= cost or scale < 1e-6:
                break
            scale *= 0.5
        if not candidate_cost <= cost:
            break
        point, cost = candidate, candidate_cost
        if np.linalg.norm(scale * step) < tolerance:
            break
    return Triangulation(point, cost)


def procrustes_align(A, B):
    """Least-squares similarity transform (rotation, translation, uniform scale) mapping A onto B.

    Parameters
    ----------
    A, B : array-like
        Point sets of identical shape (..., 3), e.g. T x J x 3.

    Returns
    -------
    SimilarityTransform
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.shape[-1] != 3:
        raise InvalidArgumentError("procrustes_align needs equal (..., 3) shapes, got {} and {}".format(A.shape, B.shape))
    A = A.reshape(-1, 3)
    B = B.reshape(-1, 3)
    n = len(A)
    if n < 3:
        raise DegenerateGeometryError("procrustes_align needs at least 3 points")
    mu_a = A.mean(axis=0)
    mu_b = B.mean(axis=0)
    A0 = A - mu_a
    B0 = B - mu_b
    spread = np.linalg.svd(A0, compute_uv=False)
    if not spread[1] > 1e-12 * max(spread[0], 1.0):
        raise DegenerateGeometryError("source points are collinear")
    U, D, Vt = np.linalg.svd(B0.T @ A0 / n)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    rotation = U @ S @ Vt
    scale = np.trace(np.diag(D) @ S) / (np.sum(A0 ** 2) / n)
    translation = mu_b - scale * rotation @ mu_a
    aligned = scale * A @ rotation.T + translation
    residual = float(np.sqrt(np.mean(np.sum((aligned - B) ** 2, axis=1))))
    return SimilarityTransform(rotation, translation, float(scale), residual)

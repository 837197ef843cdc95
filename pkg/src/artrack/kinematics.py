"""Kinematic tree of body parts and the pose parameterization.

Every quantity in a model file lives in the shared rest configuration (the
world frame at the all-zero pose).  A part's world motion composes the root's
free motion with the rotations of the joints along its chain:

    M_root  = (exp([w]x), tau)                      6 free-motion parameters
    M_child = M_parent o (T(anchor) R_joint T(-anchor))

where R_joint is the product of single-axis rotations about the joint's
listed axes, in order.  Welded parts inherit their parent's motion verbatim.
The pose vector is laid out as [w (3), tau (3), joint 0 angles, joint 1
angles, ...] in model joint order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .ellipsoid import Ellipsoid


class DimensionMismatch(ValueError):
    """Pose vector or index does not match the model layout."""


# ---------------------------------------------------------------------------
# small rotation helpers
# ---------------------------------------------------------------------------

def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def cross_rows(u, m):
    """u x row for each row of m; np.cross has too much overhead in hot loops."""
    out = np.empty_like(m)
    out[:, 0] = u[1] * m[:, 2] - u[2] * m[:, 1]
    out[:, 1] = u[2] * m[:, 0] - u[0] * m[:, 2]
    out[:, 2] = u[0] * m[:, 1] - u[1] * m[:, 0]
    return out


def cross3(u, v):
    return np.array([u[1] * v[2] - u[2] * v[1],
                     u[2] * v[0] - u[0] * v[2],
                     u[0] * v[1] - u[1] * v[0]])


def rotation_about_axis(axis, angle):
    """Rodrigues rotation about a unit axis."""
    x, y, z = np.asarray(axis, dtype=float)
    s, c = np.sin(angle), np.cos(angle)
    d = 1.0 - c
    return np.array([
        [c + x * x * d, x * y * d - z * s, x * z * d + y * s],
        [y * x * d + z * s, c + y * y * d, y * z * d - x * s],
        [z * x * d - y * s, z * y * d + x * s, c + z * z * d],
    ])


def exp_so3(w):
    """Matrix exponential of the axis-angle vector w (3,)."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    return rotation_about_axis(w / theta, theta)


def so3_left_jacobian(w):
    """Left Jacobian of SO(3): d/dw of exp([w]x) acts as [J_l(w) dw]x exp([w]x)."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    k = skew(w)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    t2 = theta * theta
    a = (1.0 - np.cos(theta)) / t2
    b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * k + b * (k @ k)


def quat_to_matrix(q):
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(r):
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# model structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidMotion:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity():
        return RigidMotion(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidMotion") -> "RigidMotion":
        """self o other (apply ``other`` first)."""
        return RigidMotion(self.rotation @ other.rotation,
                           self.rotation @ other.translation + self.translation)

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Joint:
    """Rotational joint attaching child_part to parent_part.

    ``anchor`` is the joint center and ``axes`` the (k, 3) unit rotation
    axes, both expressed in the parent part's rest frame.  Rotations are
    applied about the listed axes in order.
    """

    parent_part: int
    child_part: int
    anchor: np.ndarray
    axes: np.ndarray
    limits: np.ndarray
    name: str = ""

    def __post_init__(self):
        anchor = np.asarray(self.anchor, dtype=float).reshape(3)
        axes = np.atleast_2d(np.asarray(self.axes, dtype=float))
        limits = np.atleast_2d(np.asarray(self.limits, dtype=float))
        if not 1 <= axes.shape[0] <= 3 or axes.shape[1] != 3:
            raise ValueError("joint needs 1-3 rotation axes, got shape %s" % (axes.shape,))
        norms = np.linalg.norm(axes, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("joint axes must be unit length")
        for i in range(axes.shape[0]):
            for j in range(i + 1, axes.shape[0]):
                if np.linalg.norm(np.cross(axes[i], axes[j])) < 1e-9:
                    raise ValueError("joint axes must be pairwise non-parallel")
        if limits.shape != (axes.shape[0], 2):
            raise ValueError("limits must be (k, 2) matching the axes")
        if np.any(limits[:, 0] >= limits[:, 1]):
            raise ValueError("each limit pair needs min < max")
        if np.any(limits[:, 0] <= -np.pi) or np.any(limits[:, 1] > np.pi):
            raise ValueError("limits must lie in (-pi, pi]")
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "limits", limits)

    @property
    def dof(self):
        return self.axes.shape[0]


@dataclass(frozen=True)
class Part:
    """Rigid body part owning one or more ellipsoids in the rest frame.

    ``weld_parent`` marks a part rigidly attached to another (no joint, no
    degrees of freedom); the default human model uses two welds to stack the
    three torso parts.
    """

    name: str
    ellipsoids: tuple
    weld_parent: int | None = None


class BodyModel:
    """Immutable kinematic tree; precomputes the pose-vector layout.

    parts / joints / root_part follow the constructor arguments; welded
    parts carry their attachment in Part.weld_parent.
    """

    def __init__(self, parts, joints, root_part=0):
        self.parts = tuple(parts)
        self.joints = tuple(joints)
        self.root_part = int(root_part)
        self._validate_tree()

        self.ellipsoids = []
        self.ellipsoid_part = []
        for pi, part in enumerate(self.parts):
            for e in part.ellipsoids:
                self.ellipsoids.append(e)
                self.ellipsoid_part.append(pi)
        self.ellipsoid_part = np.asarray(self.ellipsoid_part)

        # pose layout: 6 free-motion dofs then joint angles in joint order
        self.joint_dof_start = []
        off = 6
        for j in self.joints:
            self.joint_dof_start.append(off)
            off += j.dof
        self.dof_count = off

        self._part_order = self._topological_order()
        self._chain_dofs = self._chain_dof_masks()

    # -- structure ---------------------------------------------------------

    def _parent_of(self, pi):
        part = self.parts[pi]
        if part.weld_parent is not None:
            return part.weld_parent
        for j in self.joints:
            if j.child_part == pi:
                return j.parent_part
        return None

    def _validate_tree(self):
        n = len(self.parts)
        claimed = {}
        for j in self.joints:
            if not (0 <= j.parent_part < n and 0 <= j.child_part < n):
                raise ValueError("joint references part out of range")
            if j.child_part in claimed:
                raise ValueError("part %d has two parents" % j.child_part)
            claimed[j.child_part] = True
        for pi, part in enumerate(self.parts):
            if part.weld_parent is not None:
                if pi in claimed:
                    raise ValueError("part %d is both welded and jointed" % pi)
                claimed[pi] = True
        if self.root_part in claimed:
            raise ValueError("root part must not have a parent")
        if len(claimed) != n - 1:
            raise ValueError("tree needs exactly one parent per non-root part")
        # reject cycles by walking every part up to the root
        for pi in range(n):
            seen, cur = set(), pi
            while cur is not None:
                if cur in seen:
                    raise ValueError("parent links contain a cycle")
                seen.add(cur)
                cur = self._parent_of(cur)
            if self.root_part not in seen:
                raise ValueError("part %d is not connected to the root" % pi)

    def _topological_order(self):
        order, placed = [], set()
        pending = list(range(len(self.parts)))
        while pending:
            progressed = False
            for pi in list(pending):
                par = self._parent_of(pi)
                if par is None or par in placed:
                    order.append(pi)
                    placed.add(pi)
                    pending.remove(pi)
                    progressed = True
            if not progressed:
                raise ValueError("unresolvable part ordering")
        return order

    def _chain_dof_masks(self):
        """Boolean (num_parts, dof_count): which dofs move each part."""
        masks = np.zeros((len(self.parts), self.dof_count), dtype=bool)
        joint_of_child = {j.child_part: (ji, j) for ji, j in enumerate(self.joints)}
        for pi in self._part_order:
            masks[pi, :6] = True
            par = self._parent_of(pi)
            if par is not None:
                masks[pi] |= masks[par]
            if pi in joint_of_child:
                ji, j = joint_of_child[pi]
                s = self.joint_dof_start[ji]
                masks[pi, s:s + j.dof] = True
        return masks

    # -- public surface ------------------------------------------------------

    @property
    def dof_names(self):
        names = ["root_rx", "root_ry", "root_rz", "root_tx", "root_ty", "root_tz"]
        for ji, j in enumerate(self.joints):
            base = j.name or ("joint%d" % ji)
            for k in range(j.dof):
                ax = j.axes[k]
                letter = "xyz"[int(np.argmax(np.abs(ax)))] if np.abs(ax).max() > 0.9 else ("a%d" % k)
                names.append("%s_%s" % (base, letter))
        return names

    def joint_angle_slice(self):
        """Slice of the pose vector holding all joint angles."""
        return slice(6, self.dof_count)

    def check_pose(self, pose):
        pose = np.asarray(pose, dtype=float)
        if pose.shape != (self.dof_count,):
            raise DimensionMismatch(
                "pose has shape %s, model expects (%d,)" % (pose.shape, self.dof_count))
        return pose

    def angle_limits(self):
        """(n_angles, 2) stacked joint limits in pose-vector order."""
        if not self.joints:
            return np.zeros((0, 2))
        return np.concatenate([j.limits for j in self.joints], axis=0)

    def chain_dofs(self, part_index):
        return self._chain_dofs[part_index]

    def chain_dof_indices(self, part_index):
        return np.nonzero(self._chain_dofs[part_index])[0]


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

class FkResult:
    """Per-part motions plus the world screw axis of every rotational dof.

    dof_axes[k] / dof_anchors[k] give, for rotational dof k, the current
    world direction u and a point c on its axis, such that perturbing the
    dof moves any downstream material point y by u x (y - c).  Translation
    dofs (pose indices 3:6) move every point by the unit step directly.
    """

    def __init__(self, model, pose):
        pose = model.check_pose(pose)
        self.model = model
        self.pose = pose

        n_parts = len(model.parts)
        self.part_motions = [None] * n_parts
        self.dof_axes = np.zeros((model.dof_count, 3))
        self.dof_anchors = np.zeros((model.dof_count, 3))
        self.rotational = np.ones(model.dof_count, dtype=bool)
        self.rotational[3:6] = False

        w, tau = pose[:3], pose[3:6]
        root_motion = RigidMotion(exp_so3(w), tau)
        jl = so3_left_jacobian(w)
        self.dof_axes[:3] = jl.T      # row i = J_l e_i
        self.dof_anchors[:3] = tau

        joint_of_child = {j.child_part: (ji, j) for ji, j in enumerate(model.joints)}
        for pi in model._part_order:
            part = model.parts[pi]
            if pi == model.root_part:
                self.part_motions[pi] = root_motion
                continue
            if part.weld_parent is not None:
                self.part_motions[pi] = self.part_motions[part.weld_parent]
                continue
            ji, j = joint_of_child[pi]
            parent = self.part_motions[j.parent_part]
            s = model.joint_dof_start[ji]
            angles = pose[s:s + j.dof]
            r_joint = np.eye(3)
            for k in range(j.dof):
                # axis k rotates after the k-1 preceding rotations of this joint
                self.dof_axes[s + k] = parent.rotation @ (r_joint @ j.axes[k])
                self.dof_anchors[s + k] = parent.apply(j.anchor)
                r_joint = r_joint @ rotation_about_axis(j.axes[k], angles[k])
            local = RigidMotion(r_joint, j.anchor - r_joint @ j.anchor)
            self.part_motions[pi] = parent.compose(local)

        self.ellipsoid_motions = [self.part_motions[pi] for pi in model.ellipsoid_part]
        self._frames = [None] * len(model.ellipsoids)
        self._inv_shapes = [None] * len(model.ellipsoids)

    def world_frame(self, index):
        """(rotation, translation, semi_axes) of the posed ellipsoid, cached."""
        f = self._frames[index]
        if f is None:
            e = self.model.ellipsoids[index]
            m = self.ellipsoid_motions[index]
            f = (m.rotation @ e.rotation,
                 m.rotation @ e.translation + m.translation,
                 e.semi_axes)
            self._frames[index] = f
        return f

    def inv_shape_world(self, index):
        """R D^-1 R^T of the posed ellipsoid, cached."""
        b = self._inv_shapes[index]
        if b is None:
            rot, _, axes = self.world_frame(index)
            b = (rot * axes ** 2) @ rot.T
            self._inv_shapes[index] = b
        return b

    def correspond_points(self, index, normals):
        """Surface points of the posed ellipsoid for (N, 3) unit normals."""
        binv = self.inv_shape_world(index)
        _, t_w, _ = self.world_frame(index)
        bn = normals @ binv.T
        lam = np.einsum("ij,ij->i", normals, bn) ** -0.5
        return lam[:, None] * bn + t_w

    def posed_ellipsoid(self, index):
        return apply_motion(self.model.ellipsoids[index], self.ellipsoid_motions[index])

    def posed_ellipsoids(self):
        return [self.posed_ellipsoid(i) for i in range(len(self.model.ellipsoids))]


def forward_kinematics(model: BodyModel, pose):
    """RigidMotion of every ellipsoid (rest placement excluded), in model order."""
    return FkResult(model, pose).ellipsoid_motions


def apply_motion(e: Ellipsoid, m: RigidMotion) -> Ellipsoid:
    """Rigidly displace an ellipsoid: pose composes, semi-axes unchanged."""
    return Ellipsoid(semi_axes=e.semi_axes,
                     rotation=m.rotation @ e.rotation,
                     translation=m.rotation @ e.translation + m.translation)


def _cross_many(u, m):
    """(K, 3) axes x (N, 3) rows -> (K, N, 3)."""
    out = np.empty((u.shape[0], m.shape[0], 3))
    u0 = u[:, 0, None]
    u1 = u[:, 1, None]
    u2 = u[:, 2, None]
    out[:, :, 0] = u1 * m[:, 2] - u2 * m[:, 1]
    out[:, :, 1] = u2 * m[:, 0] - u0 * m[:, 2]
    out[:, :, 2] = u0 * m[:, 1] - u1 * m[:, 0]
    return out


def correspondence_jacobian_cols(fk: FkResult, ellipsoid_index, normals, cols):
    """d x / d pose restricted to the dof indices in ``cols``; shape (N, 3, len(cols)).

    x depends on the pose both through the rigid motion of the ellipsoid and
    through the sliding of the correspondence point as the ellipsoid rotates
    under the fixed world normal.
    """
    normals = np.asarray(normals, dtype=float)
    binv = fk.inv_shape_world(ellipsoid_index)
    _, t_w, _ = fk.world_frame(ellipsoid_index)
    binv_t = binv.T
    bn = normals @ binv_t                                   # (N, 3)
    lam = np.einsum("ij,ij->i", normals, bn) ** -0.5        # (N,)
    lam3 = -0.5 * lam ** 3

    cols = np.asarray(cols)
    out = np.zeros((normals.shape[0], 3, len(cols)))
    tr = ~fk.rotational[cols]
    out[:, cols[tr] - 3, np.nonzero(tr)[0]] = 1.0           # x affine in root translation

    rot = np.nonzero(fk.rotational[cols])[0]
    if rot.size:
        u = fk.dof_axes[cols[rot]]                          # (K, 3)
        c = fk.dof_anchors[cols[rot]]
        # dB = [u]x B - B [u]x  =>  dB n = u x (B n) - B (u x n)
        dbn = _cross_many(u, bn) - _cross_many(u, normals) @ binv_t   # (K, N, 3)
        dlam = lam3 * np.einsum("nj,knj->kn", normals, dbn)           # (K, N)
        v = t_w - c
        dtw = np.empty_like(u)                                        # u x (t_w - c)
        dtw[:, 0] = u[:, 1] * v[:, 2] - u[:, 2] * v[:, 1]
        dtw[:, 1] = u[:, 2] * v[:, 0] - u[:, 0] * v[:, 2]
        dtw[:, 2] = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
        block = (dlam[:, :, None] * bn[None, :, :]
                 + lam[None, :, None] * dbn + dtw[:, None, :])
        out[:, :, rot] = block.transpose(1, 2, 0)
    return out


def correspondence_jacobian_batch(fk: FkResult, ellipsoid_index, normals):
    """Full (N, 3, dof) derivative of the correspondence point of one ellipsoid."""
    model = fk.model
    normals = np.asarray(normals, dtype=float)
    cols = model.chain_dof_indices(model.ellipsoid_part[ellipsoid_index])
    out = np.zeros((normals.shape[0], 3, model.dof_count))
    out[:, :, cols] = correspondence_jacobian_cols(fk, ellipsoid_index, normals, cols)
    return out


def pose_jacobian(model: BodyModel, pose, ellipsoid_index, surface_normal):
    """(3, dof) derivative of the correspondence point for one normal."""
    pose = model.check_pose(pose)
    if not 0 <= ellipsoid_index < len(model.ellipsoids):
        raise DimensionMismatch("ellipsoid index %d out of range" % ellipsoid_index)
    n = np.asarray(surface_normal, dtype=float)
    n = n / np.linalg.norm(n)
    fk = FkResult(model, pose)
    return correspondence_jacobian_batch(fk, ellipsoid_index, n[None, :])[0]


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def model_to_dict(model: BodyModel):
    parts = []
    for part in model.parts:
        entry = {
            "name": part.name,
            "ellipsoids": [
                {
                    "a": float(e.semi_axes[0]),
                    "b": float(e.semi_axes[1]),
                    "c": float(e.semi_axes[2]),
                    "rest_rotation": [float(v) for v in matrix_to_quat(e.rotation)],
                    "rest_translation": [float(v) for v in e.translation],
                }
                for e in part.ellipsoids
            ],
        }
        if part.weld_parent is not None:
            entry["weld_parent"] = part.weld_parent
        parts.append(entry)
    joints = [
        {
            "name": j.name,
            "parent": j.parent_part,
            "child": j.child_part,
            "anchor": [float(v) for v in j.anchor],
            "axes": [[float(v) for v in ax] for ax in j.axes],
            "limits": [[float(lo), float(hi)] for lo, hi in j.limits],
        }
        for j in model.joints
    ]
    return {"parts": parts, "joints": joints, "root": model.root_part}


def model_from_dict(doc, relaxed=False):
    parts = []
    for entry in doc["parts"]:
        ellipsoids = []
        for ed in entry["ellipsoids"]:
            a, b, c = float(ed["a"]), float(ed["b"]), float(ed["c"])
            if not relaxed:
                if abs(b - c) > 1e-12 * max(b, c, 1.0):
                    raise ValueError(
                        "part %r: b != c (%.9g vs %.9g); load with relaxed=True "
                        "for triaxial ellipsoids" % (entry.get("name", "?"), b, c))
                if a < b:
                    raise ValueError("part %r: expected a >= b" % entry.get("name", "?"))
            ellipsoids.append(Ellipsoid(
                semi_axes=np.array([a, b, c]),
                rotation=quat_to_matrix(ed["rest_rotation"]),
                translation=np.asarray(ed["rest_translation"], dtype=float)))
        parts.append(Part(name=entry.get("name", ""),
                          ellipsoids=tuple(ellipsoids),
                          weld_parent=entry.get("weld_parent")))
    joints = [
        Joint(parent_part=jd["parent"], child_part=jd["child"],
              anchor=np.asarray(jd["anchor"], dtype=float),
              axes=np.asarray(jd["axes"], dtype=float),
              limits=np.asarray(jd["limits"], dtype=float),
              name=jd.get("name", ""))
        for jd in doc["joints"]
    ]
    return BodyModel(parts, joints, root_part=doc.get("root", 0))


def save_model(model: BodyModel, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path, relaxed=False):
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh), relaxed=relaxed)


def model_digest(model: BodyModel) -> str:
    """Stable content hash used to tie motion scripts to a model."""
    blob = json.dumps(model_to_dict(model), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def default_body_model() -> BodyModel:
    """The 14-part / 11-joint / 21-ellipsoid / 26-dof human model."""
    from importlib.resources import files

    doc = json.loads(files("artrack.data").joinpath("default_body.json").read_text())
    return model_from_dict(doc)

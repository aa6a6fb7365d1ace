"""End-to-end plumbing: run configuration, the two-stage training loops,
full rig inference (mesh in, rig file out), evaluation, extra-bone
fine-tuning, and animation export.

Coordinate frames: meshes are normalized (bounding-box center at the origin,
longest edge 1) before inference; the fine stage additionally works in the
canonical hip-plane frame. Rig files are written in the original mesh
coordinates (rigid transforms survive the uniform-scale conjugation), with
the normalization record included.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import losses as lo
from . import nn
from .deform import BlendWeights, MotionFrame, RiggedCharacter, to_rest
from .errors import ConfigError, DegenerateInputError, InputError, NumericalError
from .geom import (CanonicalFrame, PoseSet, RigidTransform, axis_angle_quat,
                   canonicalize, dq_from_rigid, dq_mul, normalize_shape,
                   quat_to_mat)
from .metrics import EvalReport, bone_matching, cd_b2b, cd_j2b, cd_j2j, \
    percentage_errors
from .model import (STAGE_COARSE, STAGE_FINE, ModelConfig, RigModel,
                    extend_model)
from .sampling import (SampledShape, TriangleMesh, hierarchical_sample,
                       read_obj, sample_surface, write_obj)
from .skeleton import FRAME_INPUT, Skeleton
from .synthdata import (SynthCharacter, SynthConfig, TrainingPair,
                        attach_extra_bones, default_accessory_specs,
                        default_pose_limits, generate_character,
                        interpolate_weights, make_training_pair, sample_pose)

RIGFILE_FORMAT = "rigkit-rig-1"
VAL_SEED_BASE = 100_000


@dataclass
class RunConfig:
    stage: str = STAGE_COARSE            # coarse | fine | finetune_extra
    model: ModelConfig = field(default_factory=ModelConfig.desk_scale)
    synth: SynthConfig = field(default_factory=SynthConfig)
    total_steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    lr_peak: float = 1e-4
    lr_floor: float = 1e-5
    lambdas: lo.LossWeights = field(default_factory=lo.LossWeights)
    train_chars: int = 30
    val_chars: int = 5
    corpus_seed: int = 0
    nq_train: int = 384                  # weight-supervision queries per item
    pose_profile: str = "gaussian"       # motion-like pose statistics
    augment_rotations: bool = True
    augment_fraction: float = 0.5        # share of samples that get rotated
    tilt_max: float = 0.3
    normal_noise_prob: float = 0.3
    normal_noise_sigma: float = 0.3
    normal_zero_prob: float = 0.1
    use_gt_canonical: bool = True        # fine training canonicalization source
    canonicalize_inputs: bool = True     # ablation flag (fine stage)
    hierarchical: bool = True            # ablation flag (fine stage)
    hand_radius_mult: float = 1.5
    freeze_encoder: bool = False
    checkpoint_every: int = 0            # 0 -> total_steps // 4
    log_every: int = 1

    def validate(self) -> None:
        if self.stage not in (STAGE_COARSE, STAGE_FINE, "finetune_extra"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        want_fingers = self.model.tree_preset == "biped52"
        if self.model.tree_preset in ("biped22", "biped52") \
                and self.synth.with_fingers != want_fingers:
            raise ConfigError("model tree preset and synthetic corpus disagree "
                              "about finger bones")
        if self.stage in (STAGE_COARSE, STAGE_FINE) \
                and self.model.stage != self.stage:
            raise ConfigError(f"run stage {self.stage!r} but model stage "
                              f"{self.model.stage!r}")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("batch size and step count must be positive")


def config_from_toml(path, overrides: Optional[dict] = None) -> RunConfig:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except OSError as e:
        raise InputError(f"cannot read config {path}: {e}") from e
    except Exception as e:
        raise ConfigError(f"malformed TOML in {path}: {e}") from e
    return config_from_dict(doc, overrides)


def config_from_dict(doc: dict, overrides: Optional[dict] = None) -> RunConfig:
    doc = dict(doc)
    if overrides:
        doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        model = ModelConfig(**doc.pop("model", {}))
        synth = SynthConfig(**doc.pop("synth", {}))
        lambdas = lo.LossWeights(**doc.pop("lambdas", {}))
        run = doc.pop("run", {})
        run.update(doc)
        cfg = RunConfig(model=model, synth=synth, lambdas=lambdas, **run)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad configuration: {e}") from e
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Augmentation helpers
# ---------------------------------------------------------------------------

def yaw_tilt_rotation(rng: np.random.Generator, tilt: float = 0.3) -> RigidTransform:
    """Random facing direction (full yaw circle) plus a bounded tilt. The
    desk-scale stand-in for free 3D rotation augmentation."""
    yaw = rng.uniform(0, 2 * np.pi)
    ry = quat_to_mat(axis_angle_quat(np.array([0.0, 1.0, 0.0]), yaw))
    ax = rng.standard_normal(3)
    ax[1] = 0.0
    n = np.linalg.norm(ax)
    if n < 1e-9 or tilt <= 0:
        return RigidTransform(ry, np.zeros(3))
    rt = quat_to_mat(axis_angle_quat(ax / n, rng.uniform(-tilt, tilt)))
    return RigidTransform(rt @ ry, np.zeros(3))


def corrupt_normals(normals: np.ndarray, rng: np.random.Generator,
                    noise_prob: float, sigma: float,
                    zero_prob: float) -> np.ndarray:
    """Training-time normal corruption: occasional Gaussian noise (then
    renormalize) and occasional full dropout to zeros."""
    r = rng.random()
    if r < zero_prob:
        return np.zeros_like(normals)
    if r < zero_prob + noise_prob:
        noisy = normals + rng.normal(0.0, sigma, size=normals.shape)
        ln = np.linalg.norm(noisy, axis=1, keepdims=True)
        return np.where(ln > 1e-9, noisy / np.maximum(ln, 1e-9), 0.0)
    return normals


# ---------------------------------------------------------------------------
# Frame bookkeeping
# ---------------------------------------------------------------------------

def conjugate_pose_by_frame(pose_dq: np.ndarray,
                            frame: RigidTransform) -> np.ndarray:
    """Re-express pose-to-rest transforms after the input frame moved by
    `frame`: new_pose = old_pose o frame^-1 (applies to points already in the
    new frame)."""
    inv = dq_from_rigid(frame.inverse()).as_array()
    return dq_mul(pose_dq, np.broadcast_to(inv, pose_dq.shape))


def hand_centers_and_radius(skeleton: Skeleton, mult: float):
    tree = skeleton.tree
    li, ri = tree.index("hand_l"), tree.index("hand_r")
    j = skeleton.joints
    centers = np.stack([0.5 * (j[li, :3] + j[li, 3:]),
                        0.5 * (j[ri, :3] + j[ri, 3:])])
    length = 0.5 * (np.linalg.norm(j[li, 3:] - j[li, :3])
                    + np.linalg.norm(j[ri, 3:] - j[ri, :3]))
    return centers, mult * max(length, 1e-3)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def build_corpora(cfg: RunConfig):
    train = [generate_character(cfg.synth, cfg.corpus_seed + i)
             for i in range(cfg.train_chars)]
    val = [generate_character(cfg.synth, VAL_SEED_BASE + cfg.corpus_seed + i)
           for i in range(cfg.val_chars)]
    return train, val


def _fine_sample(cfg: RunConfig, pair: TrainingPair, frame_skel: Skeleton,
                 seed: int) -> SampledShape:
    if cfg.hierarchical:
        centers, radius = hand_centers_and_radius(frame_skel,
                                                  cfg.hand_radius_mult)
        return hierarchical_sample(pair.posed_mesh, centers, radius,
                                   cfg.model.n, cfg.model.hand_fraction, seed)
    return sample_surface(pair.posed_mesh, cfg.model.n, seed)


@dataclass
class FineItem:
    """One canonicalized fine-stage training example."""

    shape: SampledShape
    queries: np.ndarray
    gt_w: np.ndarray
    gt_joints: np.ndarray
    gt_pose: np.ndarray


def prepare_fine_item(cfg: RunConfig, char: SynthCharacter, pair: TrainingPair,
                      rng: np.random.Generator,
                      canonical_joints: Optional[np.ndarray] = None,
                      corrupt: bool = True) -> FineItem:
    """Canonicalize a training pair (optionally via provided joints, e.g.
    coarse predictions), re-sample hierarchically, pick weight queries."""
    tree = char.tree
    posed_skel = Skeleton(tree=tree, joints=pair.gt_joints, frame_tag=FRAME_INPUT)
    mesh = pair.posed_mesh
    gt_joints = pair.gt_joints
    gt_pose = pair.gt_pose_to_rest.dq
    if cfg.canonicalize_inputs:
        datum = posed_skel if canonical_joints is None else Skeleton(
            tree=tree, joints=canonical_joints, frame_tag=FRAME_INPUT)
        frame, _, verts_c = canonicalize(datum, mesh.vertices)
        mesh = TriangleMesh(vertices=verts_c, faces=mesh.faces)
        from .sampling import compute_vertex_normals
        mesh.vertex_normals = compute_vertex_normals(mesh)
        heads = frame.apply(gt_joints[:, :3])
        tails = frame.apply(gt_joints[:, 3:])
        gt_joints = np.concatenate([heads, tails], axis=1)
        gt_pose = conjugate_pose_by_frame(gt_pose, frame.transform)
        posed_skel = Skeleton(tree=tree, joints=gt_joints, frame_tag="canonical")

    pair_c = replace(pair, posed_mesh=mesh)
    shape = _fine_sample(cfg, pair_c, posed_skel, int(rng.integers(1 << 31)))
    if corrupt and shape.normals is not None:
        shape.normals = corrupt_normals(shape.normals, rng,
                                        cfg.normal_noise_prob,
                                        cfg.normal_noise_sigma,
                                        cfg.normal_zero_prob)
    # weight queries come from the body stratum: those points are sampled
    # area-uniformly over the whole surface, matching how weights are
    # queried downstream (mesh vertices), unlike the hand-heavy mixture
    from .sampling import STRATUM_BODY
    pool = shape.stratum_indices(STRATUM_BODY)
    if pool.size == 0:
        pool = np.arange(shape.count)
    nq = min(cfg.nq_train, pool.size)
    pick = pool[rng.choice(pool.size, size=nq, replace=False)]
    queries = shape.positions[pick]
    gt_w_all = interpolate_weights(char.character.weights, mesh, shape)
    return FineItem(shape=shape, queries=queries, gt_w=gt_w_all[:, pick],
                    gt_joints=gt_joints, gt_pose=gt_pose)


def fine_loss_and_grads(cfg: RunConfig, model: RigModel, item: FineItem,
                        scale: float = 1.0):
    """Teacher-forced fine forward, full loss report, and backward."""
    lam = cfg.lambdas
    queries = item.queries if lam.weights > 0 else None
    out, cache = model.fine_forward(item.shape, queries, item.gt_joints,
                                    item.gt_pose, want_cache=True)
    lw, dw = (0.0, None)
    if queries is not None:
        lw, dw = lo.l1_weights_grad(out["weights"], item.gt_w)
    lj, dj = lo.l1_joints_grad(out["joints"], item.gt_joints)
    lp, dp = lo.pose_loss_via_proxy_grad(out["pose"].dq, item.gt_pose,
                                         item.gt_joints)
    lconn_posed, dconn_posed = lo.prior_connectivity_grad(out["joints"],
                                                          model.tree)
    # rest-frame priors act through the predicted pose on the GT joints
    rest_proxy = lo.transform_joints(out["pose"].dq, item.gt_joints)
    lsym, dsym = lo.prior_symmetry_grad(rest_proxy, model.tree)
    lpar, dpar = lo.prior_parallelism_grad(rest_proxy, model.tree)
    lconn_rest, dconn_rest = lo.prior_connectivity_grad(rest_proxy, model.tree)

    d_rest = (lam.symmetry * dsym + lam.parallelism * dpar
              + lam.connectivity * dconn_rest)
    dp_total = lam.pose * dp + lo._transform_joints_backward(
        d_rest, out["pose"].dq, item.gt_joints)
    dj_total = lam.joints * dj + lam.connectivity * dconn_posed
    dw_total = None if dw is None else scale * lam.weights * dw
    model.fine_backward(cache, dw_total, scale * dj_total,
                        scale * dp_total)
    report = lo.LossReport(weights_l1=lw, joints_l1=lj, pose_l1=lp,
                           prior_connect=lconn_posed + lconn_rest,
                           prior_symmetry=lsym, prior_parallel=lpar,
                           lambdas=lam)
    return report, out


def train(cfg: RunConfig, out_dir, log_name: str = "train_log.jsonl",
          quiet: bool = False) -> Path:
    """Run one training stage; returns the final checkpoint path."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / log_name
    ckpt_path = out_dir / f"{cfg.stage}.ckpt"
    every = cfg.checkpoint_every or max(1, cfg.total_steps // 4)

    train_chars, _ = build_corpora(cfg)
    limits = [default_pose_limits(c.tree, cfg.synth.pose_scale)
              for c in train_chars]
    model = RigModel(cfg.model, seed=cfg.seed)
    if cfg.freeze_encoder:
        model.store.freeze(["enc.", "geo."])
    rng = np.random.default_rng(cfg.seed)
    t0 = time.time()

    with open(log_path, "w") as log:
        for step in range(cfg.total_steps):
            model.store.zero_grad()
            agg = lo.LossReport(lambdas=cfg.lambdas)
            for _ in range(cfg.batch_size):
                ci = int(rng.integers(len(train_chars)))
                char = train_chars[ci]
                pose = sample_pose(char.character.skeleton, limits[ci],
                                   int(rng.integers(1 << 31)),
                                   profile=cfg.pose_profile)
                rot = None
                if cfg.augment_rotations and rng.random() < cfg.augment_fraction:
                    rot = yaw_tilt_rotation(rng, cfg.tilt_max)
                pair = make_training_pair(char, pose, cfg.model.n,
                                          int(rng.integers(1 << 31)),
                                          global_rot=rot)
                inv = 1.0 / cfg.batch_size
                if cfg.stage == STAGE_COARSE:
                    out, cache = model.coarse_forward(pair.shape,
                                                      want_cache=True)
                    lj, dj = lo.l1_joints_grad(out, pair.gt_joints)
                    model.coarse_backward(cfg.lambdas.joints * inv * dj, cache)
                    agg.joints_l1 += lj * inv
                else:
                    item = prepare_fine_item(cfg, char, pair, rng)
                    rep, _ = fine_loss_and_grads(cfg, model, item, scale=inv)
                    for f in ("weights_l1", "joints_l1", "pose_l1",
                              "prior_connect", "prior_symmetry",
                              "prior_parallel"):
                        setattr(agg, f, getattr(agg, f) + getattr(rep, f) * inv)
            lr = nn.lr_schedule(step, cfg.total_steps, cfg.lr_peak, cfg.lr_floor)
            nn.adam_step(model.store, lr)
            if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
                rec = json.loads(agg.to_json())
                rec.update(step=step, lr=lr)
                log.write(json.dumps(rec, sort_keys=True) + "\n")
            if (step + 1) % every == 0:
                model.save(ckpt_path)
    model.save(ckpt_path)
    if not quiet:
        print(f"[train] {cfg.stage}: {cfg.total_steps} steps in "
              f"{(time.time() - t0) / 60:.1f} min -> {ckpt_path}",
              file=sys.stderr)
    return ckpt_path


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@dataclass
class RigResult:
    """Inference outputs in the normalized input frame, plus bookkeeping."""

    joints: np.ndarray            # (K, 6) posed, normalized frame
    rest_joints: np.ndarray       # (K, 6) predicted rest skeleton
    pose_to_rest: PoseSet         # normalized frame
    weights: BlendWeights         # at all mesh vertices
    record: "object"              # NormalizationRecord
    canonical: Optional[CanonicalFrame]
    joints_canonical: np.ndarray  # raw fine-stage outputs (canonical frame)
    pose_canonical: np.ndarray
    coarse_joints: np.ndarray
    elapsed: float


def rig_mesh(mesh: TriangleMesh, coarse: RigModel, fine: RigModel,
             seed: int = 0, hierarchical: bool = True,
             hand_radius_mult: float = 1.5,
             gt_canonical_joints: Optional[np.ndarray] = None,
             use_normals: bool = True) -> RigResult:
    """Full inference chain on an in-memory mesh.

    The coarse localizer runs twice: once on the input orientation to find
    the hip plane, and again on the canonicalized shape, where it is much
    sharper, to refine the frame and the hand centers.

    gt_canonical_joints (normalized frame) bypasses the coarse localization,
    which evaluation uses to isolate the fine stage.
    """
    t0 = time.time()
    verts_n, record = normalize_shape(mesh.vertices)
    mesh_n = TriangleMesh(vertices=verts_n, faces=mesh.faces,
                          vertex_normals=mesh.vertex_normals)
    from .sampling import compute_vertex_normals
    if mesh_n.vertex_normals is None:
        mesh_n.vertex_normals = compute_vertex_normals(mesh_n)

    def recanonicalize(base_mesh, joints, tree):
        skel = Skeleton(tree=tree, joints=joints, frame_tag=FRAME_INPUT)
        frame, skel_c, verts_c = canonicalize(skel, base_mesh.vertices)
        mesh_c = TriangleMesh(vertices=verts_c, faces=base_mesh.faces)
        mesh_c.vertex_normals = compute_vertex_normals(mesh_c)
        return frame, skel_c, mesh_c

    shape0 = sample_surface(mesh_n, coarse.config.n, seed)
    coarse_joints = coarse.coarse_forward(shape0)

    frame = None
    mesh_c = mesh_n
    hand_skel = Skeleton(tree=coarse.tree, joints=coarse_joints,
                         frame_tag=FRAME_INPUT)
    if gt_canonical_joints is not None:
        frame, hand_skel, mesh_c = recanonicalize(mesh_n, gt_canonical_joints,
                                                  fine.tree)
    else:
        try:
            frame1, _, mesh_c1 = recanonicalize(mesh_n, coarse_joints,
                                                coarse.tree)
            # second pass: the coarse model is sharpest near the canonical
            # orientation it saw most in training
            shape1 = sample_surface(mesh_c1, coarse.config.n, seed + 7)
            joints1 = coarse.coarse_forward(shape1)
            try:
                frame2, hand_skel, mesh_c = recanonicalize(mesh_c1, joints1,
                                                           coarse.tree)
                frame = CanonicalFrame(
                    frame2.transform.compose(frame1.transform))
            except DegenerateInputError:
                frame, mesh_c = frame1, mesh_c1
                hand_skel = Skeleton(tree=coarse.tree, joints=joints1,
                                     frame_tag=FRAME_INPUT)
        except DegenerateInputError:
            warnings.warn("hip localization degenerate; "
                          "skipping canonicalization")

    if hierarchical:
        centers, radius = hand_centers_and_radius(hand_skel, hand_radius_mult)
        shape = hierarchical_sample(mesh_c, centers, radius, fine.config.n,
                                    fine.config.hand_fraction, seed + 1)
    else:
        shape = sample_surface(mesh_c, fine.config.n, seed + 1)
    if not use_normals:
        shape.normals = None

    out = fine.fine_forward(shape, mesh_c.vertices)
    joints_c = out["joints"]
    pose_c = out["pose"].dq
    weights = out["weights"]

    if frame is not None:
        inv = frame.transform.inverse()
        joints = np.concatenate([inv.apply(joints_c[:, :3]),
                                 inv.apply(joints_c[:, 3:])], axis=1)
        pose = conjugate_pose_by_frame(pose_c, inv)   # pose_c o frame
    else:
        joints, pose = joints_c, pose_c
    rest = lo.transform_joints(pose, joints)

    for name, arr in (("joints", joints), ("pose", pose),
                      ("weights", weights.w), ("rest", rest)):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values in predicted {name}")

    return RigResult(joints=joints, rest_joints=rest,
                     pose_to_rest=PoseSet(dq=pose), weights=weights,
                     record=record, canonical=frame,
                     joints_canonical=joints_c, pose_canonical=pose_c,
                     coarse_joints=coarse_joints, elapsed=time.time() - t0)


def _sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def rig_result_to_file(result: RigResult, tree, provenance: dict,
                       dense_weights: bool = False) -> dict:
    """Assemble the rig JSON document in original mesh coordinates."""
    rec = result.record
    scale, center = rec.scale, rec.center

    def denorm_joints(j):
        return np.concatenate([rec.invert(j[:, :3]), rec.invert(j[:, 3:])],
                              axis=1)

    # conjugate each normalized-frame rigid map by the uniform scaling:
    # p_orig -> R p_orig + (s t + c - R c); still rigid
    dq_orig = np.empty_like(result.pose_to_rest.dq)
    from .geom import rigid_from_dq
    for i in range(dq_orig.shape[0]):
        t = rigid_from_dq(result.pose_to_rest.dq[i])
        t_orig = RigidTransform(t.rotation,
                                scale * t.translation + center
                                - t.rotation @ center)
        dq_orig[i] = dq_from_rigid(t_orig).as_array()

    sparse = result.weights.top_k(8)
    weights_out = []
    for v in range(sparse.point_count):
        col = sparse.w[:, v]
        nz = np.flatnonzero(col > 0)
        weights_out.append([[int(b), round(float(col[b]), 8)] for b in nz])

    joints = denorm_joints(result.joints)
    rest = denorm_joints(result.rest_joints)
    doc = {
        "format": RIGFILE_FORMAT,
        "bones": [{
            "name": tree.names[i],
            "parent": int(tree.parent[i]),
            "head": [float(x) for x in joints[i, :3]],
            "tail": [float(x) for x in joints[i, 3:]],
        } for i in range(tree.bone_count)],
        "rest_bones": [{
            "name": tree.names[i],
            "head": [float(x) for x in rest[i, :3]],
            "tail": [float(x) for x in rest[i, 3:]],
        } for i in range(tree.bone_count)],
        "symmetry_pairs": [list(p) for p in tree.symmetry_pairs],
        "limb_chains": [list(c) for c in tree.limb_chains],
        "pose_to_rest": [[float(x) for x in row] for row in dq_orig],
        "normalization": {"center": [float(x) for x in center],
                          "scale": float(scale)},
        "provenance": provenance,
    }
    if dense_weights:
        doc["weights_dense"] = [[float(x) for x in row]
                                for row in result.weights.w]
    doc["weights"] = weights_out
    return doc


def rig(mesh_path, coarse_ckpt, fine_ckpt, out_path=None, seed: int = 0,
        hierarchical: bool = True, dense_weights: bool = False,
        quiet: bool = False) -> dict:
    """Load checkpoints, rig the mesh at mesh_path, optionally write JSON."""
    coarse = RigModel.load(coarse_ckpt)
    fine = RigModel.load(fine_ckpt)
    # extended fine models append accessory bones; the coarse localizer only
    # needs the shared biped core (hips and thighs) for canonicalization
    if fine.config.k < coarse.config.k:
        raise ConfigError("fine checkpoint has fewer bones than the coarse one")
    for name in ("hips", "thigh_l", "thigh_r"):
        if name not in coarse.tree.names:
            raise ConfigError(f"coarse checkpoint lacks datum bone {name!r}")
    mesh = read_obj(mesh_path)
    result = rig_mesh(mesh, coarse, fine, seed=seed, hierarchical=hierarchical)
    provenance = {
        "coarse_checkpoint_sha256": _sha256(coarse_ckpt),
        "fine_checkpoint_sha256": _sha256(fine_ckpt),
        "seed": seed,
        "hierarchical": hierarchical,
        "model": asdict(fine.config),
    }
    doc = rig_result_to_file(result, fine.tree, provenance,
                             dense_weights=dense_weights)
    _validate_rigfile(doc)
    if out_path is not None:
        Path(out_path).write_text(rigfile_dumps(doc))
    if not quiet:
        print(f"[rig] {Path(mesh_path).name}: {mesh.vertex_count} vertices in "
              f"{result.elapsed:.2f} s", file=sys.stderr)
    return doc


def rigfile_dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def _validate_rigfile(doc: dict) -> None:
    for entry in doc["weights"]:
        if len(entry) > 8:
            raise NumericalError("rig file has more than 8 weights per vertex")
        s = sum(w for _, w in entry)
        if abs(s - 1.0) > 1e-4:
            raise NumericalError(f"sparse weights sum to {s}, not 1")
    flat = []
    for key in ("bones", "rest_bones"):
        for b in doc[key]:
            flat.extend(b["head"] + b["tail"])
    for row in doc["pose_to_rest"]:
        flat.extend(row)
    if not np.all(np.isfinite(np.asarray(flat, dtype=np.float64))):
        raise NumericalError("rig file contains non-finite values")


def load_rigfile(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise InputError(f"cannot read rig file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"malformed rig file {path}: {e}") from e
    if doc.get("format") != RIGFILE_FORMAT:
        raise InputError(f"{path}: not a {RIGFILE_FORMAT} document")
    return doc


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_character(cfg: RunConfig, char: SynthCharacter, coarse: RigModel,
                       fine: RigModel, pose_seed: int,
                       gt_canonical: bool = False,
                       bone_subset: Optional[list[int]] = None) -> EvalReport:
    """Rig one posed synthetic character and score it against the oracle."""
    limits = default_pose_limits(char.tree, cfg.synth.pose_scale)
    pose = sample_pose(char.character.skeleton, limits, pose_seed,
                       profile=cfg.pose_profile)
    rot = yaw_tilt_rotation(np.random.default_rng(pose_seed + 1), cfg.tilt_max) \
        if cfg.augment_rotations else None
    pair = make_training_pair(char, pose, cfg.model.n, pose_seed + 2,
                              global_rot=rot)

    verts_n, record = normalize_shape(pair.posed_mesh.vertices)
    gt_joints_n = np.concatenate([record.apply(pair.gt_joints[:, :3]),
                                  record.apply(pair.gt_joints[:, 3:])], axis=1)
    # pose-to-rest re-expressed in the normalized frame (uniform-scale
    # conjugation keeps it rigid); the rest pose also lands normalized
    gt_pose_n = np.empty_like(pair.gt_pose_to_rest.dq)
    from .geom import rigid_from_dq
    for i in range(gt_pose_n.shape[0]):
        t = rigid_from_dq(pair.gt_pose_to_rest.dq[i])
        tr_n = (t.rotation @ record.center + t.translation
                - record.center) / record.scale
        gt_pose_n[i] = dq_from_rigid(
            RigidTransform(t.rotation, tr_n)).as_array()

    result = rig_mesh(pair.posed_mesh, coarse, fine, seed=pose_seed + 3,
                      hierarchical=cfg.hierarchical,
                      hand_radius_mult=cfg.hand_radius_mult,
                      gt_canonical_joints=gt_joints_n if gt_canonical else None)

    diag = float(np.linalg.norm(verts_n.max(axis=0) - verts_n.min(axis=0)))
    gt_w = char.character.weights
    weights_err, joints_err, poses_err = percentage_errors(
        result.weights, gt_w, result.joints, gt_joints_n,
        result.pose_to_rest.dq, gt_pose_n, diag)
    if bone_subset is not None:
        sub = np.asarray(bone_subset)
        pj = result.joints[sub].reshape(-1, 3)
        gj = gt_joints_n[sub].reshape(-1, 3)
        joints_err = float(np.linalg.norm(pj - gj, axis=1).mean() / diag * 100)

    pred_skel = Skeleton(tree=fine.tree, joints=result.joints,
                         frame_tag=FRAME_INPUT)
    gt_skel = Skeleton(tree=char.tree, joints=gt_joints_n,
                       frame_tag=FRAME_INPUT)
    iou, precision, recall = bone_matching(pred_skel, gt_skel)
    return EvalReport(iou=iou, precision=precision, recall=recall,
                      cd_j2j=cd_j2j(pred_skel, gt_skel),
                      cd_j2b=cd_j2b(pred_skel, gt_skel),
                      cd_b2b=cd_b2b(pred_skel, gt_skel),
                      weights_err=weights_err, joints_err=joints_err,
                      poses_err=poses_err)


def evaluate(cfg: RunConfig, coarse_ckpt, fine_ckpt, out_path=None,
             poses_per_char: int = 2, gt_canonical: bool = False,
             bone_subset: Optional[list[int]] = None):
    """Score the validation corpus; returns (mean report, per-char reports)."""
    coarse = RigModel.load(coarse_ckpt)
    fine = RigModel.load(fine_ckpt)
    _, val = build_corpora(cfg)
    reports = []
    for i, char in enumerate(val):
        for k in range(poses_per_char):
            reports.append(evaluate_character(
                cfg, char, coarse, fine, pose_seed=7000 + 17 * i + k,
                gt_canonical=gt_canonical, bone_subset=bone_subset))
    mean = EvalReport(**{f: float(np.mean([getattr(r, f) for r in reports]))
                         for f in ("iou", "precision", "recall", "cd_j2j",
                                   "cd_j2b", "cd_b2b", "weights_err",
                                   "joints_err", "poses_err")})
    if out_path is not None:
        Path(out_path).write_text(json.dumps(
            {"mean": json.loads(mean.to_json()),
             "per_character": [json.loads(r.to_json()) for r in reports]},
            sort_keys=True, indent=1))
    return mean, reports


# ---------------------------------------------------------------------------
# Extra-bone fine-tuning
# ---------------------------------------------------------------------------

def finetune_extra(base_ckpt, cfg: RunConfig, out_dir,
                   specs=None, quiet: bool = False):
    """Extend a trained fine model with accessory bones and fine-tune only
    the weight head and the appended queries."""
    base = RigModel.load(base_ckpt)
    specs = specs if specs is not None else default_accessory_specs()
    sample_char = attach_extra_bones(
        generate_character(cfg.synth, cfg.corpus_seed), specs)
    new_tree = sample_char.tree
    model = extend_model(base, new_tree, seed=cfg.seed)
    trainable = {"wdec.head.lin2.W", "wdec.head.lin2.b", "bdec.queries_extra"}
    model.store.freeze([n for n in model.store.names() if n not in trainable])

    chars = [attach_extra_bones(generate_character(cfg.synth,
                                                   cfg.corpus_seed + i), specs)
             for i in range(cfg.train_chars)]
    limits = [default_pose_limits(c.tree, cfg.synth.pose_scale) for c in chars]
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "finetune_extra.ckpt"
    log_path = out_dir / "finetune_log.jsonl"

    fine_cfg = replace(cfg, stage=STAGE_FINE,
                       model=replace(base.config, k=new_tree.bone_count,
                                     tree_preset="custom"))
    with open(log_path, "w") as log:
        for step in range(cfg.total_steps):
            model.store.zero_grad()
            agg = lo.LossReport(lambdas=cfg.lambdas)
            for _ in range(cfg.batch_size):
                ci = int(rng.integers(len(chars)))
                char = chars[ci]
                pose = sample_pose(char.character.skeleton, limits[ci],
                                   int(rng.integers(1 << 31)),
                                   profile=cfg.pose_profile)
                pair = make_training_pair(char, pose, cfg.model.n,
                                          int(rng.integers(1 << 31)))
                item = prepare_fine_item(fine_cfg, char, pair, rng)
                rep, _ = fine_loss_and_grads(fine_cfg, model, item,
                                             scale=1.0 / cfg.batch_size)
                agg.weights_l1 += rep.weights_l1 / cfg.batch_size
            lr = nn.lr_schedule(step, cfg.total_steps, cfg.lr_peak, cfg.lr_floor)
            nn.adam_step(model.store, lr)
            log.write(json.dumps({"step": step, "weights_l1": agg.weights_l1},
                                 sort_keys=True) + "\n")
    model.save(ckpt_path)
    if not quiet:
        print(f"[finetune] wrote {ckpt_path}", file=sys.stderr)
    return ckpt_path


def parameter_diff(base: RigModel, tuned: RigModel) -> list[str]:
    """Names of tensors whose pretrained entries changed between two models.

    For grown tensors only the overlapping leading block counts: fresh
    rows/columns added by the extension are not changes to the core.
    """
    changed = []
    base_names = set(base.store.names())
    for name in tuned.store.names():
        if name not in base_names:
            changed.append(name)
            continue
        a = base.store[name].value
        b = tuned.store[name].value
        block = b[tuple(slice(0, s) for s in a.shape)]
        if not np.array_equal(a, block):
            changed.append(name)
    return changed


# ---------------------------------------------------------------------------
# Animation export
# ---------------------------------------------------------------------------

def load_clip(path) -> tuple[float, list[PoseSet]]:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise InputError(f"cannot read clip {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"malformed clip {path}: {e}") from e
    fps = float(doc.get("fps", 24.0))
    frames = [PoseSet(dq=np.asarray(f, dtype=np.float64))
              for f in doc["frames"]]
    return fps, frames


def save_clip(path, fps: float, frames: list[PoseSet]) -> None:
    doc = {"fps": fps, "frames": [[[float(x) for x in row] for row in f.dq]
                                  for f in frames]}
    Path(path).write_text(json.dumps(doc))


def export_animation(rig_doc: dict, mesh: TriangleMesh, frames: list[PoseSet],
                     out_dir, mode: str = "linear") -> list[Path]:
    """Write one OBJ per frame: pose-to-rest first, then each frame's pose."""
    k = len(rig_doc["bones"])
    dense = np.zeros((k, mesh.vertex_count))
    if "weights_dense" in rig_doc:
        dense = np.asarray(rig_doc["weights_dense"], dtype=np.float64)
    else:
        for v, entries in enumerate(rig_doc["weights"]):
            for b, w in entries:
                dense[int(b), v] = w
    weights = BlendWeights(w=dense)
    p2r = PoseSet(dq=np.asarray(rig_doc["pose_to_rest"], dtype=np.float64))
    rest_verts = to_rest(mesh.vertices, weights, p2r, mode=mode)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for fi, poses in enumerate(frames):
        if poses.bone_count != k:
            raise ConfigError(f"clip frame {fi} has {poses.bone_count} bones, "
                              f"rig has {k}")
        verts = to_rest(rest_verts, weights, poses, mode=mode)
        path = out_dir / f"frame_{fi:04d}.obj"
        write_obj(path, TriangleMesh(vertices=verts, faces=mesh.faces))
        paths.append(path)
    return paths

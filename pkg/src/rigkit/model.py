"""Rigging network: particle shape encoder with normal-aware attention,
spatially continuous weight decoder, learnable bone-query decoder, and the
ancestry-masked bone transformer with level-by-level autoregressive inference.

All forward passes are deterministic; backward passes are composed by hand
in reverse order (see nn). Geometry stays float64 at the interfaces and is
cast to the store dtype (float32 in production) on entry.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import nn
from .deform import BlendWeights
from .errors import InputError
from .geom import PoseSet
from .sampling import (STRATUM_BODY, STRATUM_HAND_LEFT, STRATUM_HAND_RIGHT,
                       SampledShape, fps, hierarchical_fps)
from .skeleton import (ROOT, KinematicTree, ancestral_mask, level_schedule,
                       standard_humanoid)

STAGE_COARSE = "coarse"
STAGE_FINE = "fine"


@dataclass
class ShapeLatent:
    """Latent feature set of an encoded shape, shape (M, C)."""

    f: np.ndarray

    def __post_init__(self):
        if self.f.ndim != 2:
            raise ValueError("latent must be (M, C)")

    @property
    def m(self) -> int:
        return int(self.f.shape[0])

    @property
    def c(self) -> int:
        return int(self.f.shape[1])


@dataclass
class BoneEmbeddings:
    """Per-bone shape-aware embeddings, shape (K, C)."""

    f_b: np.ndarray


@dataclass
class ModelConfig:
    n: int = 2048            # input point count
    m: int = 64              # latent count
    c: int = 48              # channel width (divisible by 6 and by heads)
    k: int = 22              # bone count
    heads: int = 8
    self_layers: int = 2
    wdec_layers: int = 1
    causal_layers: int = 3
    ffn_mult: int = 2
    hand_fraction: float = 0.5
    # share of latent anchors reserved for the hand strata; at small M the
    # body needs proportionally more anchors than the input point ratio
    latent_hand_fraction: Optional[float] = None
    # coordinate scale fed to the sinusoid: with few octaves the top
    # frequency (2^(octaves-1) * pe_scale) must still resolve the smallest bones
    pe_scale: float = 1.0
    # sinusoid octave count; None ties it to the channel width (C // 6).
    # The learned lift maps the sinusoid to C either way, so small models
    # can still carry a full frequency band.
    pe_octaves: Optional[int] = None
    stage: str = STAGE_COARSE
    use_normals: bool = False
    use_structure_transformer: bool = True
    tree_preset: str = "biped22"   # biped22 | biped52 | custom

    def __post_init__(self):
        if self.c % self.heads != 0:
            raise ValueError("channel width must be divisible by heads")
        if self.c < 6:
            raise ValueError("channel width must be at least 6")
        if self.stage not in (STAGE_COARSE, STAGE_FINE):
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def pe_width(self) -> int:
        """Sinusoidal code width (6 per octave); defaults to C rounded down."""
        if self.pe_octaves is not None:
            return 6 * self.pe_octaves
        return self.c - self.c % 6

    @classmethod
    def desk_scale(cls, stage: str = STAGE_COARSE, **kw) -> "ModelConfig":
        kw.setdefault("use_normals", stage == STAGE_FINE)
        kw.setdefault("latent_hand_fraction", 0.25)
        return cls(n=2048, m=64, c=48, k=22, heads=8, stage=stage, **kw)

    @classmethod
    def paper_scale(cls, stage: str = STAGE_FINE, **kw) -> "ModelConfig":
        kw.setdefault("use_normals", stage == STAGE_FINE)
        return cls(n=32768, m=512, c=512, k=52, heads=8, stage=stage,
                   tree_preset="biped52", **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def tree_for_config(config: ModelConfig) -> KinematicTree:
    if config.tree_preset == "biped22":
        return standard_humanoid(with_fingers=False)
    if config.tree_preset == "biped52":
        return standard_humanoid(with_fingers=True)
    raise ValueError("custom tree presets must be passed explicitly")


class RigModel:
    """One trained network (coarse or fine stage) over a fixed kinematic tree.

    extra_bones > 0 marks the trailing bones as appended learnable queries
    (the extra-bone fine-tuning path); they live in a separate parameter so
    the pretrained queries can stay frozen.
    """

    def __init__(self, config: ModelConfig, tree: Optional[KinematicTree] = None,
                 dtype=np.float32, seed: int = 0, extra_bones: int = 0):
        self.config = config
        self.tree = tree if tree is not None else tree_for_config(config)
        if self.tree.bone_count != config.k:
            raise ValueError(f"tree has {self.tree.bone_count} bones, "
                             f"config expects {config.k}")
        if not (0 <= extra_bones < config.k):
            raise ValueError("extra_bones out of range")
        self.extra_bones = extra_bones
        self.store = nn.ParamStore(seed=seed, dtype=dtype)
        st = self.store
        c, heads, mult = config.c, config.heads, config.ffn_mult

        # positional code lifted into the channel width by a shared linear
        # (the sinusoid itself needs a width divisible by 6)
        self.point_embed = nn.Linear(st, "embed.points", config.pe_width, c)

        if config.use_normals:
            self.nrm_embed = nn.Linear(st, "geo.embed", 3, c)
            self.geo_wq = nn.Linear(st, "geo.wq", c, c)
            self.geo_wk = nn.Linear(st, "geo.wk", c, c)
            self.geo_wv = nn.Linear(st, "geo.wv", c, c)
            # zero-init output projection: the normal branch contributes
            # nothing until training moves it
            self.geo_wo = nn.Linear(st, "geo.wo", c, c, init="zeros")

        self.enc = nn.CrossBlock(st, "enc.cross", c, heads, mult)
        self.trunk = [nn.SelfBlock(st, f"trunk.{i}", c, heads, mult)
                      for i in range(config.self_layers)]
        self.q_bones = st.add("bdec.queries", (config.k - extra_bones, c),
                              init="gauss")
        self.q_bones_extra = (st.add("bdec.queries_extra", (extra_bones, c),
                                     init="gauss") if extra_bones else None)
        self.bdec = nn.CrossBlock(st, "bdec.cross", c, heads, mult)

        if config.stage == STAGE_FINE:
            self.wdec = [nn.CrossBlock(st, f"wdec.cross{i}", c, heads, mult)
                         for i in range(config.wdec_layers)]
            # MLP decoding head; its final layer is what extra-bone
            # fine-tuning retrains
            self.w_head = nn.MLP(st, "wdec.head", c, 2 * c, config.k)
            if config.use_structure_transformer:
                self.attr_enc_joints = nn.MLP(st, "st.attr_joints", 6, c, c)
                self.attr_enc_pose = nn.MLP(st, "st.attr_pose", 8, c, c)
                self.start_latent = st.add("st.start", (c,), init="gauss")
                self.causal = [nn.SelfBlock(st, f"st.block{i}", c, heads, mult)
                               for i in range(config.causal_layers)]
            self.joints_head = nn.Linear(st, "heads.joints", c, 6)
            self.pose_head = nn.Linear(st, "heads.pose", c, 8)
            # start the pose output at the identity transform so the unit
            # normalization is well-conditioned from step one
            self.pose_head.b.value[:] = np.array(
                [1, 0, 0, 0, 0, 0, 0, 0], dtype=st.dtype)
        else:
            self.joints_head = nn.Linear(st, "heads.joints", c, 6)

        self.mask = ancestral_mask(self.tree, include_self=True).mask
        self.schedule = level_schedule(self.tree)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def dtype(self):
        return self.store.dtype

    @property
    def bone_count(self) -> int:
        base = self.q_bones.value.shape[0]
        extra = 0 if self.q_bones_extra is None else self.q_bones_extra.value.shape[0]
        return base + extra

    def bone_queries(self) -> np.ndarray:
        if self.q_bones_extra is None:
            return self.q_bones.value
        return np.concatenate([self.q_bones.value, self.q_bones_extra.value])

    # -- encoder -------------------------------------------------------------

    def _geo_attention(self, codes: np.ndarray, normals: np.ndarray):
        """Per-point attention over the 2-token set {coordinate code, normal
        embedding}; returns (residual, normal-attention scores, cache)."""
        heads = self.config.heads
        n, c = codes.shape
        dh = c // heads
        ne, c_ne = self.nrm_embed.forward(normals)
        q, c_q = self.geo_wq.forward(codes)
        kc, c_kc = self.geo_wk.forward(codes)
        kn, c_kn = self.geo_wk.forward(ne)
        vc, c_vc = self.geo_wv.forward(codes)
        vn, c_vn = self.geo_wv.forward(ne)
        qh = q.reshape(n, heads, dh)
        kh = np.stack([kc, kn], axis=1).reshape(n, 2, heads, dh)
        vh = np.stack([vc, vn], axis=1).reshape(n, 2, heads, dh)
        scores = np.einsum("nhd,nkhd->nhk", qh, kh) / np.sqrt(dh)
        scores = scores.astype(codes.dtype)
        probs = nn.softmax_forward(scores, axis=-1)
        att = np.einsum("nhk,nkhd->nhd", probs, vh).reshape(n, c)
        res, c_o = self.geo_wo.forward(att)
        cache = (c_ne, c_q, c_kc, c_kn, c_vc, c_vn, qh, kh, vh, probs, c_o, dh)
        return res, probs[:, :, 1], cache

    def _geo_attention_backward(self, dres: np.ndarray, cache):
        c_ne, c_q, c_kc, c_kn, c_vc, c_vn, qh, kh, vh, probs, c_o, dh = cache
        n, heads = probs.shape[:2]
        c = heads * dh
        datt = self.geo_wo.backward(dres, c_o).reshape(n, heads, dh)
        dprobs = np.einsum("nhd,nkhd->nhk", datt, vh)
        dvh = np.einsum("nhk,nhd->nkhd", probs, datt)
        dscores = nn.softmax_backward(dprobs, probs, axis=-1) / np.sqrt(dh)
        dscores = dscores.astype(dres.dtype)
        dqh = np.einsum("nhk,nkhd->nhd", dscores, kh)
        dkh = np.einsum("nhk,nhd->nkhd", dscores, qh)
        dq = dqh.reshape(n, c)
        dk = dkh.reshape(n, 2, c)
        dv = dvh.reshape(n, 2, c)
        dcodes = self.geo_wq.backward(dq, c_q)
        dcodes += self.geo_wk.backward(dk[:, 0], c_kc)
        dcodes += self.geo_wv.backward(dv[:, 0], c_vc)
        dne = self.geo_wk.backward(dk[:, 1], c_kn)
        dne += self.geo_wv.backward(dv[:, 1], c_vn)
        self.nrm_embed.backward(dne, c_ne)
        return dcodes

    def latent_fractions(self) -> dict[int, float]:
        hf = 0.0
        if self.config.stage == STAGE_FINE:
            hf = self.config.latent_hand_fraction
            if hf is None:
                hf = self.config.hand_fraction
        return {STRATUM_BODY: 1.0 - hf,
                STRATUM_HAND_LEFT: hf / 2.0,
                STRATUM_HAND_RIGHT: hf / 2.0}

    def select_latents(self, shape: SampledShape) -> np.ndarray:
        """FPS indices used as latent queries; stratified in the fine stage."""
        if self.config.stage == STAGE_FINE:
            return hierarchical_fps(shape, self.config.m, self.latent_fractions())
        return fps(shape.positions, self.config.m, start=0)

    def encode_shape(self, shape: SampledShape,
                     fps_indices: Optional[np.ndarray] = None):
        """Latent set F = CrossAttn(PE(selected points), PE(all points)),
        with an additive zero-initialized normal branch when normals exist."""
        if shape.count != self.config.n:
            raise ValueError(f"expected {self.config.n} points, got {shape.count}")
        pos = shape.positions.astype(self.dtype)
        pe = nn.positional_encoding(pos * self.dtype.type(self.config.pe_scale),
                                    self.config.pe_width)
        base, c_embed = self.point_embed.forward(pe)
        codes = base
        geo_cache = None
        geo_scores = None
        if self.config.use_normals and shape.normals is not None:
            res, geo_scores, geo_cache = self._geo_attention(
                base, shape.normals.astype(self.dtype))
            codes = base + res
        sel = self.select_latents(shape) if fps_indices is None else fps_indices
        f, enc_cache = self.enc.forward(codes[sel], codes)
        cache = {"enc": enc_cache, "geo": geo_cache, "sel": sel,
                 "embed": c_embed, "geo_scores": geo_scores}
        return ShapeLatent(f=f), cache

    def encode_backward(self, df: np.ndarray, cache) -> None:
        dq, dkv = self.enc.backward(df, cache["enc"])
        dcodes = dkv
        np.add.at(dcodes, cache["sel"], dq)
        dbase = dcodes
        if cache["geo"] is not None:
            dbase = dcodes + self._geo_attention_backward(dcodes, cache["geo"])
        self.point_embed.backward(dbase, cache["embed"])

    # -- shared latent refinement and decoders --------------------------------

    def refine(self, latent: ShapeLatent):
        h = latent.f
        caches = []
        for blk in self.trunk:
            h, c = blk.forward(h)
            caches.append(c)
        return h, caches

    def refine_backward(self, dh: np.ndarray, caches) -> np.ndarray:
        for blk, c in zip(reversed(self.trunk), reversed(caches)):
            dh = blk.backward(dh, c)
        return dh

    def _weights_from(self, f_ref: np.ndarray, queries: np.ndarray):
        pe = nn.positional_encoding(
            queries.astype(self.dtype) * self.dtype.type(self.config.pe_scale),
            self.config.pe_width)
        h, c0 = self.point_embed.forward(pe)
        c1 = []
        for blk in self.wdec:
            h, c = blk.forward(h, f_ref)
            c1.append(c)
        logits, c2 = self.w_head.forward(h)
        probs = nn.softmax_forward(logits, axis=-1)   # (Nq, K'), rows sum to 1
        return probs.T, (c0, c1, c2, probs)

    def _weights_backward(self, dw: np.ndarray, cache):
        c0, c1, c2, probs = cache
        dlogits = nn.softmax_backward(dw.T, probs, axis=-1)
        dh = self.w_head.backward(dlogits, c2)
        df_ref = None
        for blk, c in zip(reversed(self.wdec), reversed(c1)):
            dh, dkv = blk.backward(dh, c)
            df_ref = dkv if df_ref is None else df_ref + dkv
        self.point_embed.backward(dh, c0)
        return df_ref

    def _bones_from(self, f_ref: np.ndarray):
        fb, c = self.bdec.forward(self.bone_queries().copy(), f_ref)
        return fb, c

    def _bones_backward(self, dfb: np.ndarray, cache):
        dq, df_ref = self.bdec.backward(dfb, cache)
        k = self.q_bones.value.shape[0]
        self.q_bones.add_grad(dq[:k])
        if self.q_bones_extra is not None:
            self.q_bones_extra.add_grad(dq[k:])
        return df_ref

    def decode_weights(self, latent: ShapeLatent, queries: np.ndarray) -> BlendWeights:
        """Blend weights at arbitrary query coordinates (spatial field)."""
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        f_ref, _ = self.refine(latent)
        w, _ = self._weights_from(f_ref, queries)
        return BlendWeights(w=w.astype(np.float64))

    def decode_bone_embeddings(self, latent: ShapeLatent) -> BoneEmbeddings:
        f_ref, _ = self.refine(latent)
        fb, _ = self._bones_from(f_ref)
        return BoneEmbeddings(f_b=fb)

    # -- structure-aware transformer ------------------------------------------

    def bone_attribute_encoder(self, values: np.ndarray):
        """Map per-bone attribute rows (K, 6) or (K, 8) into (K, C) latents."""
        values = np.asarray(values)
        if values.ndim != 2 or values.shape[1] not in (6, 8):
            raise ValueError("attribute rows must be (K, 6) or (K, 8)")
        enc = self.attr_enc_joints if values.shape[1] == 6 else self.attr_enc_pose
        out, _ = enc.forward(values.astype(self.dtype))
        return out

    def attr_latents(self, joints: np.ndarray, pose: np.ndarray):
        lj, cj = self.attr_enc_joints.forward(np.asarray(joints, dtype=self.dtype))
        lp, cp = self.attr_enc_pose.forward(np.asarray(pose, dtype=self.dtype))
        return lj + lp, (cj, cp)

    def attr_latents_backward(self, dl: np.ndarray, cache):
        cj, cp = cache
        self.attr_enc_joints.backward(dl, cj)
        self.attr_enc_pose.backward(dl, cp)

    def _parent_latents(self, latents: np.ndarray) -> np.ndarray:
        out = np.empty_like(latents)
        parent = self.tree.parent
        for i in range(self.tree.bone_count):
            if parent[i] == ROOT:
                out[i] = self.start_latent.value
            else:
                out[i] = latents[parent[i]]
        return out

    def _parent_latents_backward(self, dout: np.ndarray) -> np.ndarray:
        dlat = np.zeros_like(dout)
        parent = self.tree.parent
        for i in range(self.tree.bone_count):
            if parent[i] == ROOT:
                self.start_latent.add_grad(dout[i])
            else:
                dlat[parent[i]] += dout[i]
        return dlat

    @staticmethod
    def _dq_head_normalize(raw: np.ndarray):
        """Project raw (K, 8) head outputs onto unit + Plucker dual quaternions."""
        r, d = raw[:, :4], raw[:, 4:]
        n = np.sqrt(np.sum(r * r, axis=1, keepdims=True) + 1e-12)
        ru, du = r / n, d / n
        s = np.sum(ru * du, axis=1, keepdims=True)
        duo = du - s * ru
        return np.concatenate([ru, duo], axis=1), (ru, du, duo, s, n)

    @staticmethod
    def _dq_head_normalize_backward(dout: np.ndarray, cache):
        ru, du, duo, s, n = cache
        drout, ddout = dout[:, :4], dout[:, 4:]
        # through the Plucker projection
        ddu = ddout - ru * np.sum(ru * ddout, axis=1, keepdims=True)
        dru = drout - du * np.sum(ddout * ru, axis=1, keepdims=True) - s * ddout
        # through the normalization by |real|
        dr = (dru - ru * np.sum(ru * dru, axis=1, keepdims=True)
              - ru * np.sum(du * ddu, axis=1, keepdims=True)) / n
        dd = ddu / n
        return np.concatenate([dr, dd], axis=1)

    def structure_teacher_forced(self, fb: np.ndarray, latents: np.ndarray):
        """Causal pass with provided per-bone attribute latents (training path).

        Returns (joints (K, 6), pose (K, 8) unit+Plucker, cache).
        """
        if fb.shape != latents.shape:
            raise ValueError("bone embeddings and latents must share (K, C)")
        if fb.shape[0] != self.mask.shape[0]:
            raise ValueError("mask/tree size does not match bone embeddings")
        tokens = fb + self._parent_latents(latents)
        h = tokens
        caches = []
        for blk in self.causal:
            h, c = blk.forward(h, self.mask)
            caches.append(c)
        joints, cj = self.joints_head.forward(h)
        pose_raw, cp = self.pose_head.forward(h)
        pose, cn = self._dq_head_normalize(pose_raw)
        return joints, pose, (caches, cj, cp, cn)

    def structure_teacher_forced_backward(self, djoints, dpose, cache):
        caches, cj, cp, cn = cache
        dpose_raw = self._dq_head_normalize_backward(dpose, cn)
        dh = self.joints_head.backward(djoints, cj)
        dh = dh + self.pose_head.backward(dpose_raw, cp)
        for blk, c in zip(reversed(self.causal), reversed(caches)):
            dh = blk.backward(dh, c)
        dfb = dh
        dlatents = self._parent_latents_backward(dh.copy())
        return dfb, dlatents

    def structure_infer(self, fb: np.ndarray):
        """Next-child-bone decoding: one kinematic-tree level per iteration,
        re-encoding latents from the predictions made so far."""
        k = fb.shape[0]
        joints = np.zeros((k, 6), dtype=np.float64)
        pose = np.tile(np.array([1.0, 0, 0, 0, 0, 0, 0, 0]), (k, 1))
        for level in self.schedule:
            latents, _ = self.attr_latents(joints, pose)
            j_all, p_all, _ = self.structure_teacher_forced(fb, latents)
            joints[level] = j_all[level]
            pose[level] = p_all[level]
        return joints, pose

    def _direct_heads(self, fb: np.ndarray):
        joints, cj = self.joints_head.forward(fb)
        pose_raw, cp = self.pose_head.forward(fb)
        pose, cn = self._dq_head_normalize(pose_raw)
        return joints, pose, (cj, cp, cn)

    def _direct_heads_backward(self, djoints, dpose, cache):
        cj, cp, cn = cache
        dpose_raw = self._dq_head_normalize_backward(dpose, cn)
        dfb = self.joints_head.backward(djoints, cj)
        dfb = dfb + self.pose_head.backward(dpose_raw, cp)
        return dfb

    # -- full stage forwards ---------------------------------------------------

    def coarse_forward(self, shape: SampledShape, want_cache: bool = False):
        """Joint positions only: encoder -> bone decoder -> joints head."""
        latent, c_enc = self.encode_shape(shape)
        f_ref, c_trunk = self.refine(latent)
        fb, c_bones = self._bones_from(f_ref)
        joints, c_head = self.joints_head.forward(fb)
        joints = joints.astype(np.float64)
        if not want_cache:
            return joints
        return joints, {"enc": c_enc, "trunk": c_trunk, "bones": c_bones,
                        "head": c_head}

    def coarse_backward(self, djoints: np.ndarray, cache) -> None:
        dfb = self.joints_head.backward(djoints.astype(self.dtype), cache["head"])
        df_ref = self._bones_backward(dfb, cache["bones"])
        df = self.refine_backward(df_ref, cache["trunk"])
        self.encode_backward(df, cache["enc"])

    def fine_forward(self, shape: SampledShape, queries: Optional[np.ndarray],
                     gt_joints: Optional[np.ndarray] = None,
                     gt_pose: Optional[np.ndarray] = None,
                     want_cache: bool = False):
        """Full fine-stage pass. With gt_joints/gt_pose the bone transformer is
        teacher-forced; otherwise it runs autoregressively. queries=None skips
        the weight branch."""
        latent, c_enc = self.encode_shape(shape)
        f_ref, c_trunk = self.refine(latent)
        fb, c_bones = self._bones_from(f_ref)

        w = c_w = None
        if queries is not None:
            w, c_w = self._weights_from(f_ref, np.asarray(queries))

        teacher = gt_joints is not None
        if not self.config.use_structure_transformer:
            joints, pose, c_st = self._direct_heads(fb)
            c_attr = None
        elif teacher:
            latents, c_attr = self.attr_latents(gt_joints, gt_pose)
            joints, pose, c_st = self.structure_teacher_forced(fb, latents)
        else:
            joints, pose = self.structure_infer(fb)
            c_st = c_attr = None

        out = {
            "weights": None if w is None else BlendWeights(w=w.astype(np.float64)),
            "joints": np.asarray(joints, dtype=np.float64),
            "pose": PoseSet(dq=np.asarray(pose, dtype=np.float64)),
        }
        if not want_cache:
            return out
        cache = {"enc": c_enc, "trunk": c_trunk, "bones": c_bones, "w": c_w,
                 "st": c_st, "attr": c_attr, "teacher": teacher}
        return out, cache

    def fine_backward(self, cache, dw: Optional[np.ndarray],
                      djoints: np.ndarray, dpose: np.ndarray) -> None:
        if not cache["teacher"] and self.config.use_structure_transformer:
            raise ValueError("backward requires a teacher-forced forward")
        djoints = np.asarray(djoints, dtype=self.dtype)
        dpose = np.asarray(dpose, dtype=self.dtype)
        if self.config.use_structure_transformer:
            dfb, dlat = self.structure_teacher_forced_backward(
                djoints, dpose, cache["st"])
            self.attr_latents_backward(dlat, cache["attr"])
        else:
            dfb = self._direct_heads_backward(djoints, dpose, cache["st"])
        df_ref = self._bones_backward(dfb, cache["bones"])
        if dw is not None:
            df_ref = df_ref + self._weights_backward(
                np.asarray(dw, dtype=self.dtype), cache["w"])
        df = self.refine_backward(df_ref, cache["trunk"])
        self.encode_backward(df, cache["enc"])

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        from .skeleton import tree_to_dict
        meta = {"config": asdict(self.config), "tree": tree_to_dict(self.tree),
                "extra_bones": self.extra_bones}
        nn.save_checkpoint(self.store, path, meta=meta)
        with open(str(path) + ".json", "w") as f:
            json.dump(meta, f, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path, dtype=np.float32) -> "RigModel":
        from .skeleton import tree_from_dict
        tensors, meta = nn.load_checkpoint(path)
        if "config" not in meta or "tree" not in meta:
            raise InputError(f"{path}: checkpoint missing model metadata")
        config = ModelConfig(**meta["config"])
        tree = tree_from_dict(meta["tree"])
        model = cls(config, tree=tree, dtype=dtype,
                    extra_bones=int(meta.get("extra_bones", 0)))
        model.store.load_state(tensors)
        return model


def extend_model(base: RigModel, new_tree: KinematicTree,
                 seed: int = 0) -> RigModel:
    """Grow a trained fine-stage model onto a tree with appended bones.

    The pretrained parameters are copied; the new bones get fresh learnable
    queries plus new weight-head columns whose bias starts so low that the
    extended model reproduces the base weights on standard bones to float32
    round-off before any fine-tuning.
    """
    if base.config.stage != STAGE_FINE:
        raise ValueError("only fine-stage models can be extended")
    k_old = base.config.k
    k_new = new_tree.bone_count
    if k_new <= k_old:
        raise ValueError("extended tree must append bones")
    if list(new_tree.parent[:k_old]) != list(base.tree.parent):
        raise ValueError("extended tree must keep the base bones as a prefix")
    from dataclasses import replace as dc_replace
    config = dc_replace(base.config, k=k_new, tree_preset="custom")
    model = RigModel(config, tree=new_tree, dtype=base.dtype, seed=seed,
                     extra_bones=k_new - k_old)

    state = {n: p.value.copy() for n, p in
             ((n, base.store[n]) for n in base.store.names())}
    for name in model.store.names():
        p = model.store[name]
        if name == "bdec.queries_extra":
            continue
        if name == "wdec.head.lin2.W":
            p.value[:, :k_old] = state[name]
            p.value[:, k_old:] = 0.0
        elif name == "wdec.head.lin2.b":
            p.value[:k_old] = state[name]
            # deep in the softmax tail: new bones get ~0 weight everywhere
            # until fine-tuning pulls them up
            p.value[k_old:] = -30.0
        else:
            p.value[...] = state[name]
    return model

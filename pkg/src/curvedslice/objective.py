"""One evaluation of the slicing objective: networks -> deformation -> losses -> parameter gradients."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from . import fields
from .cage import CageMesh
from .deformation import (DeformationSystem, assemble_system, backprop_deform, deform,
                          lpd_cotangent_to_xi)
from .losses import (LossBreakdown, LossParams, LossWeights, SampleSetB, SampleSetT, loss_ca,
                     loss_harmonic_q, loss_harmonic_s, loss_po, loss_sf, loss_sr, total_loss)

logger = logging.getLogger(__name__)

TERMS = ("sf", "sr", "po", "ca", "hs", "hq")


@dataclass(eq=False)
class Scene:
    """Everything that stays fixed while the networks train."""

    cage: CageMesh
    system: DeformationSystem
    B: SampleSetB
    T: SampleSetT
    b_elem: np.ndarray
    t_elem: np.ndarray
    params: LossParams
    weights: LossWeights

    def coefficients(self) -> dict:
        w = self.weights
        return {"sf": w.sf, "sr": w.sr, "po": w.po, "ca": 0.0, "hs": w.hs, "hq": w.hq}


def _keep(sample_set, mask):
    return type(sample_set)(**{f.name: (getattr(sample_set, f.name)[mask]
                                        if isinstance(getattr(sample_set, f.name), np.ndarray) else
                                        getattr(sample_set, f.name))
                               for f in dataclasses.fields(sample_set)})


def make_scene(cage: CageMesh, B: SampleSetB, T: SampleSetT | None = None, params=None, weights=None,
               gamma: float = 1e-2, system: DeformationSystem | None = None) -> Scene:
    """Locate every sample in the cage and factorize the deformation system."""
    T = SampleSetT.empty() if T is None else T
    b_elem, _ = cage.locate(B.points)
    if (b_elem < 0).any():
        logger.warning("%d boundary samples fall outside the cage and are dropped", int((b_elem < 0).sum()))
        B = _keep(B, b_elem >= 0)
        B = dataclasses.replace(B, neighbors=_remap_neighbors(B.neighbors, b_elem >= 0))
        b_elem = b_elem[b_elem >= 0]
    t_elem = cage.locate(T.points)[0] if len(T) else np.zeros(0, np.int64)
    if (t_elem < 0).any():
        logger.warning("%d stress samples fall outside the cage and are dropped", int((t_elem < 0).sum()))
        T = _keep(T, t_elem >= 0)
        t_elem = t_elem[t_elem >= 0]
    system = assemble_system(cage, gamma) if system is None else system
    return Scene(cage, system, B, T, b_elem, t_elem, params or LossParams(), weights or LossWeights())


def _remap_neighbors(nbr, keep):
    """``nbr`` rows already filtered; ids still refer to the unfiltered set."""
    # neighbours pointing at dropped samples fall back to the sample itself (zero offset)
    new_id = np.cumsum(keep) - 1
    rows = np.arange(len(nbr))[:, None]
    return np.where(keep[nbr], new_id[nbr], rows)


@dataclass(eq=False)
class Evaluation:
    breakdown: LossBreakdown
    state: object
    fq: fields.FieldSample
    fs: fields.FieldSample
    value: float  # coefficient-weighted objective actually differentiated
    grad_q: list | None = None
    grad_s: list | None = None

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([fields.flatten(self.grad_q), fields.flatten(self.grad_s)])


def evaluate(scene: Scene, qnet, snet, coeffs: dict | None = None, want_grad: bool = True,
             ca_margin: float = 0.0) -> Evaluation:
    """Forward pass over all terms; gradients are taken of sum(coeffs[t] * L_t).

    ``coeffs`` defaults to the scene's loss weights with L_CA excluded (the
    constraint is handled by the correction step). The breakdown always holds
    the raw, unweighted terms with L_CA at zero margin.
    """
    coeffs = scene.coefficients() if coeffs is None else {t: float(coeffs.get(t, 0.0)) for t in TERMS}
    cage, prm = scene.cage, scene.params
    centers = cage.centers
    fq = fields.forward(qnet, centers)
    fs = fields.forward(snet, centers)
    state = deform(scene.system, fq.value, fs.value)
    d = state.lpd
    valid = ~state.degenerate

    B = scene.B
    if state.degenerate.any():
        B = dataclasses.replace(B, active=B.active & valid[scene.b_elem])
    T = scene.T
    if len(T) and state.degenerate.any():
        T = dataclasses.replace(T, volumes=T.volumes * valid[scene.t_elem])
    dB = d[scene.b_elem]
    dT = d[scene.t_elem]

    sf, c_sf = loss_sf(B, dB, prm.alpha, prm.k_sf)
    po, c_po = loss_po(B, dB)
    sr, c_sr = loss_sr(T, dT, prm.beta, prm.k_sr)
    pairs = cage.adjacency
    ca, c_ca, skipped = loss_ca(pairs, cage.face_normals, d, prm.phi, valid)
    if ca_margin:
        ca_m, c_ca, _ = loss_ca(pairs, cage.face_normals, d, prm.phi, valid, margin=ca_margin)
    else:
        ca_m = ca
    hs, c_hs = loss_harmonic_s(pairs, cage.volumes, fs.value)
    hq, c_hq = loss_harmonic_q(pairs, cage.volumes, fq.value)

    b = LossBreakdown(sf=sf, sr=sr, po=po, ca=ca, hs=hs, hq=hq,
                      degenerate=int(state.degenerate.sum()), ca_skipped=skipped)
    total_loss(b, scene.weights)
    vals = {"sf": sf, "sr": sr, "po": po, "ca": ca_m, "hs": hs, "hq": hq}
    value = sum(coeffs[t] * vals[t] for t in TERMS)
    ev = Evaluation(b, state, fq, fs, float(value))
    if not want_grad:
        return ev

    d_cot = coeffs["ca"] * c_ca
    np.add.at(d_cot, scene.b_elem, coeffs["sf"] * c_sf + coeffs["po"] * c_po)
    if len(T):
        np.add.at(d_cot, scene.t_elem, coeffs["sr"] * c_sr)
    xi_cot = lpd_cotangent_to_xi(cage, state, d_cot)
    q_cot, s_cot = backprop_deform(scene.system, state, xi_cot)
    q_cot = q_cot + coeffs["hq"] * c_hq
    s_cot = s_cot + coeffs["hs"] * c_hs
    ev.grad_q = fields.backward(qnet, fq, q_cot)
    ev.grad_s = fields.backward(snet, fs, s_cot)
    return ev


def directions(scene: Scene, state):
    """Per-sample LPDs (B, T) and validity masks for reporting."""
    d = state.lpd
    ok = ~state.degenerate
    return d[scene.b_elem], ok[scene.b_elem], d[scene.t_elem], ok[scene.t_elem]


def sf_violating_fraction(scene: Scene, state) -> float:
    dB, okB, _, _ = directions(scene, state)
    act = scene.B.active & okB
    if not act.any():
        return 0.0
    v = -np.einsum("ij,ij->i", scene.B.normals, dB) > np.sin(scene.params.alpha)
    return float(v[act].mean())


def sr_violating_fraction(scene: Scene, state) -> float:
    _, _, dT, okT = directions(scene, state)
    if not okT.any():
        return 0.0
    v = np.abs(np.einsum("ij,ij->i", scene.T.tau, dT)) > np.sin(scene.params.beta)
    return float(v[okT].mean())

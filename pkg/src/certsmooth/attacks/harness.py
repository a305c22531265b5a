"""Run attacks over a set of files and report per-file JSONL plus a summary."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .. import pe_format
from ..certify import certify_mixed
from ..classifiers import TrainedModel
from ..smoothing import MALICIOUS, RandomizedScheme, predict_randomized, predict_smoothed, tally_chunks
from .ga import GaConfig, ga_optimize
from .manipulations import AttackPlan, combined, extend_code_caves, inject_sections, padding_slack, shift_sections

SCHEMES = ("chunk", "ns-baseline", "rs-ablate", "rs-delete")
ATTACKS = ("padding", "padding_slack", "shift", "inject", "caves", "combined")
DEFAULT_PARAMS = {
    "padding": {"pad_bytes": 10000},
    "padding_slack": {"pad_bytes": 10000},
    "shift": {"amount": 4096},
    "inject": {"count": 10},
    "caves": {"per_gap": 512},
    "combined": {},
}


@dataclass(frozen=True)
class Predictor:
    """Soft score in [0,1] for a file; >= 0.5 means detected as malicious."""

    scheme: str
    score: Callable[[bytes], float]
    model: TrainedModel
    z: int


def make_predictor(scheme: str, model: TrainedModel, z: int | None = None, seed: int = 0,
                   votes: int = 20) -> Predictor:
    z = model.z if z is None else z
    if scheme == "chunk":
        return Predictor(scheme, lambda b: predict_smoothed(model, b, z).prob_malicious, model, z)
    if scheme == "ns-baseline":
        return Predictor(scheme, model.score_file, model, z)
    if scheme in ("rs-ablate", "rs-delete"):
        rs = (RandomizedScheme.byte_ablate if scheme == "rs-ablate" else RandomizedScheme.byte_delete)(votes=votes, seed=seed)
        return Predictor(scheme, lambda b: predict_randomized(model, b, rs).prob_malicious, model, z)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def build_plan(attack: str, data: bytes, params: dict | None = None, pool: bytes | None = None,
               seed: int = 0) -> AttackPlan:
    params = {**DEFAULT_PARAMS.get(attack, {}), **(params or {})}
    img = pe_format.parse(data)
    if attack == "padding":
        return padding_slack(img, params["pad_bytes"], include_slack=False)
    if attack == "padding_slack":
        return padding_slack(img, params["pad_bytes"], include_slack=True)
    if attack == "shift":
        return shift_sections(img, params["amount"])
    if attack == "inject":
        return inject_sections(img, params["count"], params.get("per_section_size"), seed_content=pool, seed=seed)
    if attack == "caves":
        return extend_code_caves(img, params["per_gap"])
    if attack == "combined":
        return combined(img, seed_content=pool, seed=seed, **params)
    raise ValueError(f"unknown attack {attack!r}; expected one of {ATTACKS}")


def plan_certified(plan: AttackPlan, tally) -> bool:
    """Whether the clean tally certifies a correct malicious label against
    everything the plan may change (structural header edits count as patches)."""
    patches = list(plan.patch_sizes) + [n for _, n in plan.structural_regions]
    inserts = list(plan.insertion_sizes)
    if not patches and not inserts:
        return tally.n_malicious >= tally.n_benign
    cert = certify_mixed(tally, patches, inserts, tally.z)
    return cert.certified and cert.label == MALICIOUS


def attack_file(data: bytes, attack: str, predictor: Predictor, ga: GaConfig, params: dict | None = None,
                pool: bytes | None = None) -> dict:
    params = {**DEFAULT_PARAMS.get(attack, {}), **(params or {})}
    clean = predictor.score(data)
    plan = build_plan(attack, data, params, pool, ga.seed)
    certified = False
    if predictor.scheme == "chunk":
        certified = plan_certified(plan, tally_chunks(predictor.model, data, predictor.z))
    if clean < 0.5:
        adv = clean  # already missed, nothing to optimize
    elif plan.n_writable == 0:
        adv = predictor.score(plan.to_bytes())
    else:
        adv = ga_optimize(plan, predictor.score, ga, pool).best_score
    return {
        "sha256": hashlib.sha256(data).hexdigest(),
        "attack": attack,
        "scheme": predictor.scheme,
        "params": params,
        "clean_score": round(float(clean), 6),
        "adv_score": round(float(adv), 6),
        "evaded": bool(clean >= 0.5 and adv < 0.5),
        "certified": bool(certified),
    }


def run_attack(files: Sequence[bytes], attack: str, predictor: Predictor, ga: GaConfig,
               params: dict | None = None, pool: bytes | None = None, threads: int = 1) -> list[dict]:
    """Attack each (malicious) file; rows come back in input order."""
    def one(data: bytes) -> dict:
        return attack_file(data, attack, predictor, ga, params, pool)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(one, files))
    return [one(f) for f in files]


def rows_to_jsonl(rows: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


@dataclass(frozen=True)
class SummaryRow:
    scheme: str
    attack: str
    n_files: int
    clean_acc: float
    adv_acc: float
    cert_acc: float | None

    def cells(self) -> list[str]:
        adv = f"{100 * self.adv_acc:.2f}"
        if self.cert_acc is not None:
            adv += f" ({100 * self.cert_acc:.2f})"
        return [self.scheme, self.attack, str(self.n_files), f"{100 * self.clean_acc:.2f}", adv]


def summarize(rows: Sequence[dict]) -> list[SummaryRow]:
    """Detection accuracy on malicious files, clean and adversarial; the
    chunk scheme also reports certified accuracy."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["scheme"], r["attack"]), []).append(r)
    out = []
    for (scheme, attack), rs in groups.items():
        n = len(rs)
        clean = sum(r["clean_score"] >= 0.5 for r in rs) / n
        adv = sum(r["adv_score"] >= 0.5 for r in rs) / n
        cert = sum(r["certified"] for r in rs) / n if scheme == "chunk" else None
        out.append(SummaryRow(scheme, attack, n, clean, adv, cert))
    return out


def summary_table(summary: Sequence[SummaryRow]) -> str:
    header = ["scheme", "attack", "n_files", "clean_acc", "adv_acc (certified)"]
    body = [header] + [s.cells() for s in summary]
    widths = [max(len(row[i]) for row in body) for i in range(len(header))]
    return "".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n" for row in body)

"""Workflow orchestration behind the CLI commands: fine-tune, prototype
building, inference, and evaluation, wired through the module contracts."""

from __future__ import annotations

import hashlib
import importlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import finetune as ft
from .config import RunConfig
from .data import (
    SupportSet,
    TestItem,
    generate_synthetic_dataset,
    load_dataset,
    sample_k_shot,
)
from .errors import ConfigError, DataError, PortError
from .imageops import load_binary_mask, load_image
from .masks import MaskProposal, grid_scale, multiscale_masks
from .metrics import EvaluationReport, category_metrics
from .pipeline import InpaintCache, InpaintRequest, InpaintResult, inpaint
from .ports import (
    BiasDenoiser,
    HashTextEncoder,
    IdentityCodec,
    MultiScalePerceptual,
    PooledFeatureExtractor,
    PortsBundle,
    oracle_inpainter,
    validate_ports,
)
from .prompts import aggregate_prompt_embedding, load_prompt_library, prompts_for_category
from .prototypes import (
    PrototypeBank,
    build_prototype_bank,
    load_bank,
    prototype_error_map,
    prototype_mask,
    save_bank,
    variance_split_threshold,
)
from .schedule import build_schedule
from .scoring import (
    ScoreMap,
    fuse_final,
    harmonic_fuse,
    load_score_map,
    perceptual_distance_map,
    prototype_score,
    save_score_map,
    save_score_png,
    save_score_sidecar,
    scale_score_map,
    smooth_and_image_score,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Ports and backends
# --------------------------------------------------------------------------

def build_ports(cfg: RunConfig) -> PortsBundle:
    """Construct the port bundle for the configured backend and probe it."""
    if cfg.backend == "factory":
        ports = _ports_from_factory(cfg.ports_factory)
    else:
        pool2 = max(cfg.image_size // 32, 1)
        ports = PortsBundle(
            codec=IdentityCodec(),
            denoiser=BiasDenoiser(latent_channels=3),
            text=HashTextEncoder(),
            patch_extractor=PooledFeatureExtractor(pool2=pool2),
            perceptual=MultiScalePerceptual(pools=(1, 2)),
        )
    report = validate_ports(ports.codec, ports.denoiser, ports.text,
                            image_size=min(cfg.image_size, 64))
    if not report.ok:
        details = "; ".join(f"{p.name}: {p.detail}" for p in report.failures())
        raise PortError(f"port probes failed: {details}")
    return ports


def _ports_from_factory(spec: str) -> PortsBundle:
    module_name, _, attr = spec.partition(":")
    if not module_name or not attr:
        raise ConfigError(f"ports_factory must look like 'module:callable', got {spec!r}")
    try:
        module = importlib.import_module(module_name)
        factory = getattr(module, attr)
    except (ImportError, AttributeError) as exc:
        raise PortError(f"cannot load ports factory {spec!r}: {exc}") from exc
    ports = factory()
    if not isinstance(ports, PortsBundle):
        raise PortError(f"ports factory {spec!r} must return a PortsBundle")
    return ports


@dataclass
class _DiffusionInpainter:
    """Inpaint closure over the diffusion path for one category."""

    ports: PortsBundle
    schedule: object
    condition: np.ndarray
    lam: float
    n_steps: int
    cache: InpaintCache | None = None

    def __call__(self, image: np.ndarray, mask: MaskProposal, seed: int) -> InpaintResult:
        req = InpaintRequest(image=image, mask=mask, condition=self.condition,
                             lam=self.lam, n_steps=self.n_steps, seed=seed)
        if self.cache is not None:
            hit = self.cache.get(req)
            if hit is not None:
                return hit
        result = inpaint(req, self.ports.codec, self.ports.denoiser, self.schedule)
        if self.cache is not None:
            self.cache.put(req, result)
        return result


@dataclass
class _OracleInpainterFn:
    """Inpaint closure over the perfect-inpainting stub for one item."""

    clean: np.ndarray

    def __call__(self, image: np.ndarray, mask: MaskProposal, seed: int) -> InpaintResult:
        stub = oracle_inpainter(self.clean)
        return InpaintResult(inpainted=stub.inpaint(image, mask.mask), mask=mask, steps_run=0)


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------

def load_support_images(cfg: RunConfig, support: SupportSet) -> dict[str, list[np.ndarray]]:
    return {cat: [load_image(p, cfg.image_size) for p in paths]
            for cat, paths in support.per_category.items()}


def load_support_foregrounds(cfg: RunConfig, support: SupportSet) -> dict[str, list]:
    """Curated foreground masks: an optional `_fg`-suffixed sibling image
    per training image; None where absent."""
    out: dict[str, list] = {}
    for cat, paths in support.per_category.items():
        row = []
        for p in paths:
            p = Path(p)
            fg = p.with_name(f"{p.stem}_fg{p.suffix}")
            row.append(load_binary_mask(fg, cfg.image_size) if fg.exists() else None)
        out[cat] = row
    return out


def item_seed(global_seed: int, rel: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{rel}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def _prompt_sets(cfg: RunConfig, categories) -> dict:
    library = load_prompt_library(cfg.prompt_library or None)
    return {cat: prompts_for_category(cat, library) for cat in categories}


def score_one_image(
    image: np.ndarray,
    inpaint_fn,
    perc,
    cfg: RunConfig,
    *,
    bank: PrototypeBank | None = None,
    patch_fx=None,
    seed_base: int = 0,
) -> tuple[ScoreMap, float]:
    """Full per-image scoring: multi-scale inpaintings, harmonic fusion,
    optional prototype blending, smoothing, image score."""
    h, w = image.shape[:2]
    masks = multiscale_masks(h, w, cfg.scales)
    per_scale = []
    for k in sorted(cfg.scales):
        results = []
        for idx, m in enumerate(mm for mm in masks if grid_scale(mm) == k):
            results.append(inpaint_fn(image, m, seed_base + k * 1000 + idx))
        per_scale.append(scale_score_map(image, results, perc, k))
    s_ms = harmonic_fuse(per_scale, cfg.epsilon)

    alpha = cfg.effective_alpha
    zero = ScoreMap(values=np.zeros((h, w)), kind="prototype")
    if alpha > 0.0 and bank is not None and patch_fx is not None:
        error_map = prototype_error_map(image, bank, patch_fx)
        r = variance_split_threshold(error_map)
        if r is None:
            s_pg = zero
        else:
            error_map.threshold = r
            m_p = prototype_mask(error_map, r, h, w)
            if m_p.coverage == 0.0:
                s_pg = zero
            else:
                res = inpaint_fn(image, m_p, seed_base + 999_983)
                d = perceptual_distance_map(image, res.inpainted, perc)
                s_pg = prototype_score(m_p, d)
        s_map = fuse_final(s_ms, s_pg, alpha)
    else:
        s_map = fuse_final(s_ms, zero, 0.0)
    return smooth_and_image_score(s_map, cfg.sigma)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> Path:
    if not cfg.data_root:
        raise ConfigError("data_root must point at the directory to create")
    return generate_synthetic_dataset(cfg.data_root, cfg.synth)


def cmd_finetune(cfg: RunConfig) -> dict[str, str]:
    """Fine-tune denoiser then decoder; write checkpoints and loss CSVs."""
    if cfg.k == 0:
        raise ConfigError("zero-shot requires no fine-tuning")
    if cfg.backend == "oracle":
        raise ConfigError("the oracle backend has no trainable ports")
    index = load_dataset(cfg.data_root, cfg.layout)
    support = sample_k_shot(index, cfg.k, cfg.seed)
    images = load_support_images(cfg, support)
    ports = build_ports(cfg)
    prompt_sets = _prompt_sets(cfg, index.categories)
    schedule = build_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end,
                              cfg.schedule_interpolation)

    out = Path(cfg.output_dir) / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)

    def checkpoint_cb(epoch: int, weights: dict) -> None:
        np.savez(out / f"denoiser_epoch{epoch:06d}.npz", config_hash=cfg.digest, **weights)

    den_weights, den_trace = ft.finetune_denoiser(
        images, ports, cfg.finetune, prompt_sets, schedule,
        texture_categories=cfg.texture_categories,
        foregrounds=load_support_foregrounds(cfg, support),
        checkpoint_cb=checkpoint_cb)
    dec_weights, dec_trace = ft.finetune_decoder(images, ports, cfg.finetune)

    paths = {}
    for name, weights, trace in (("denoiser", den_weights, den_trace),
                                 ("decoder", dec_weights, dec_trace)):
        ckpt = out / f"{name}.npz"
        np.savez(ckpt, config_hash=cfg.digest, **weights)
        csv_path = out / f"{name}_loss.csv"
        trace.write_csv(csv_path, config_hash=cfg.digest)
        paths[name] = str(ckpt)
        paths[f"{name}_loss"] = str(csv_path)
    return paths


def cmd_build_prototypes(cfg: RunConfig) -> dict[str, str]:
    if cfg.k == 0:
        raise ConfigError("zero-shot runs have no support set to build prototypes from")
    index = load_dataset(cfg.data_root, cfg.layout)
    support = sample_k_shot(index, cfg.k, cfg.seed)
    images = load_support_images(cfg, support)
    ports = build_ports(cfg)
    out = Path(cfg.output_dir) / "prototypes"
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for cat in index.categories:
        bank = build_prototype_bank(images[cat], ports.patch_extractor,
                                    rotations=cfg.rotations, category=cat)
        path = out / f"{cat}.bank"
        save_bank(bank, path)
        paths[cat] = str(path)
    return paths


def _bank_for(cfg: RunConfig, cat: str, images: dict, ports: PortsBundle) -> PrototypeBank | None:
    if cfg.effective_alpha == 0.0:
        return None
    path = Path(cfg.output_dir) / "prototypes" / f"{cat}.bank"
    if path.exists():
        return load_bank(path)
    return build_prototype_bank(images[cat], ports.patch_extractor,
                                rotations=cfg.rotations, category=cat)


def _score_stem(cat: str, item: TestItem) -> str:
    p = Path(item.path)
    return f"{cat}__{p.parent.name}__{p.stem}"


def cmd_infer(cfg: RunConfig) -> Path:
    """Score every test image; persist score maps, PNGs, and sidecars."""
    index = load_dataset(cfg.data_root, cfg.layout)
    ports = build_ports(cfg)
    scores_dir = Path(cfg.output_dir) / "scores"
    scores_dir.mkdir(parents=True, exist_ok=True)
    cache = InpaintCache(cfg.cache_dir) if cfg.cache_dir else None

    support_images: dict[str, list[np.ndarray]] = {}
    if cfg.k > 0:
        support = sample_k_shot(index, cfg.k, cfg.seed)
        support_images = load_support_images(cfg, support)

    schedule = build_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end,
                              cfg.schedule_interpolation)
    manifest_items = []
    jobs = []
    for cat in index.categories:
        prompt_set = _prompt_sets(cfg, [cat])[cat]
        condition = aggregate_prompt_embedding(prompt_set, ports.text)
        bank = _bank_for(cfg, cat, support_images, ports) if cfg.k > 0 else None
        for item in index.test_items[cat]:
            jobs.append((cat, item, condition, bank))
            manifest_items.append({
                "category": cat,
                "image": item.path,
                "label": item.label,
                "gt_path": item.gt_path,
                "stem": _score_stem(cat, item),
            })

    def run_job(job):
        cat, item, condition, bank = job
        image = load_image(item.path, cfg.image_size)
        rel = str(Path(item.path).relative_to(cfg.data_root))
        seed = item_seed(cfg.seed, rel)
        if cfg.backend == "oracle":
            clean_path = item.clean_path if item.label == "anomalous" else item.path
            if clean_path is None:
                raise DataError(f"oracle backend needs a clean reference for {item.path}")
            fn = _OracleInpainterFn(clean=load_image(clean_path, cfg.image_size))
        else:
            fn = _DiffusionInpainter(ports=ports, schedule=schedule, condition=condition,
                                     lam=cfg.lam_for(cat), n_steps=cfg.n_steps, cache=cache)
        smoothed, s_i = score_one_image(
            image, fn, ports.perceptual, cfg,
            bank=bank, patch_fx=ports.patch_extractor, seed_base=seed)
        stem = _score_stem(cat, item)
        save_score_map(smoothed, scores_dir / f"{stem}.smap", config_hash=cfg.digest)
        save_score_png(smoothed, scores_dir / f"{stem}.png")
        save_score_sidecar(scores_dir / f"{stem}.json", s_i, cfg.digest,
                           extra={"label": item.label, "category": cat})

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(run_job, jobs))
    else:
        for job in jobs:
            run_job(job)

    manifest = {
        "config_hash": cfg.digest,
        "seed": cfg.seed,
        "image_size": cfg.image_size,
        "pro_fpr_cap": cfg.pro_fpr_cap,
        "items": manifest_items,
    }
    with open(scores_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return scores_dir


def cmd_evaluate(cfg: RunConfig, scores_dir=None) -> EvaluationReport:
    """Compute the report from a score directory produced by cmd_infer."""
    scores_dir = Path(scores_dir) if scores_dir else Path(cfg.output_dir) / "scores"
    manifest_path = scores_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest at {manifest_path}; run infer first")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)

    missing = []
    hashes = set()
    for entry in manifest["items"]:
        for suffix in (".smap", ".json"):
            if not (scores_dir / (entry["stem"] + suffix)).exists():
                missing.append(entry["stem"] + suffix)
    if missing:
        raise DataError("missing score files: " + ", ".join(sorted(missing)))

    size = int(manifest["image_size"])
    by_cat: dict[str, dict[str, list]] = {}
    for entry in manifest["items"]:
        with open(scores_dir / (entry["stem"] + ".json"), "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        hashes.add(sidecar["config_hash"])
        smap = load_score_map(scores_dir / (entry["stem"] + ".smap"))
        gt = (load_binary_mask(entry["gt_path"], size) if entry["label"] == "anomalous"
              else np.zeros((size, size), dtype=np.uint8))
        slot = by_cat.setdefault(entry["category"], {
            "scores": [], "labels": [], "maps": [], "gts": []})
        slot["scores"].append(float(sidecar["image_score"]))
        slot["labels"].append(1 if entry["label"] == "anomalous" else 0)
        slot["maps"].append(smap.values)
        slot["gts"].append(gt)

    if len(hashes) > 1:
        raise DataError(f"mixed config hashes in {scores_dir}: {sorted(hashes)}")
    if hashes and manifest["config_hash"] not in hashes:
        raise DataError("manifest config hash does not match sidecars")

    report = EvaluationReport()
    for cat, slot in sorted(by_cat.items()):
        report.per_category[cat] = category_metrics(
            slot["scores"], slot["labels"], slot["maps"], slot["gts"],
            fpr_cap=float(manifest.get("pro_fpr_cap", cfg.pro_fpr_cap)))
        report.counts[cat] = {
            "images": len(slot["scores"]),
            "pixels": int(sum(m.size for m in slot["maps"])),
        }

    eval_dir = Path(cfg.output_dir) / "evaluation"
    eval_dir.mkdir(parents=True, exist_ok=True)
    (eval_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    report.write_csv(eval_dir / "report.csv")
    return report

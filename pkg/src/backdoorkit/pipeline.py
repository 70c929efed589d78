"""Config-driven experiment stages behind the command-line interface.

Configs are INI-style key=value sections. Every artifact a stage writes
carries the hash of the config that produced it; stages refuse to combine
artifacts from different configs unless forced. Reports are deterministic
key=value text (no timestamps), so identical configs and seeds reproduce
byte-identical outputs.
"""

import configparser
import csv
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import data_io as dio
from . import detect as det
from . import metrics as met
from . import model as mod
from . import poison as poi
from . import stego as stg
from . import trigger_opt as topt


class ConfigError(Exception):
    pass


class ArtifactError(Exception):
    pass


_DEFAULTS = {
    "dataset": {
        "source": "synthetic",
        "classes": "10",
        "height": "32", "width": "32", "channels": "3",
        "train_per_class": "800", "val_per_class": "100",
        "noise": "80", "contrast": "64",
        "seed": "0",
        "idx_images": "", "idx_labels": "",
    },
    "arch": {
        "conv_filters": "8,16",
        "kernel": "3",
        "hidden": "64",
        "seed": "0",
    },
    "pretrain": {
        "epochs": "16", "batch_size": "32", "lr": "0.001", "seed": "0",
    },
    "attack": {
        # family: stego | l2 | l0 | linf
        "family": "stego",
        "payload": "Apple", "payload_size": "500", "bits_per_byte": "1",
        "anchor_count": "1", "scale": "10",
        "stop_norm": "5.0", "stop_threshold": "0.12", "keep_pixels": "16",
        "phase1_cap": "2000", "lr": "0.1", "lr_decay": "0.95",
        "rho_init": "1.0", "rho_decay": "0.9",
        "seed": "0",
    },
    "poison": {
        "mode": "single-target",
        "source": "4", "target": "7", "rate": "0.1", "seed": "11",
    },
    "retrain": {
        "epochs": "20", "batch_size": "8", "lr": "0.001", "seed": "3",
        "stop_asr": "0.95",
    },
    "eval": {
        "pass_samples": "64",
    },
    "detect": {
        "epochs": "120", "batch_size": "32", "lr": "0.1",
        "lambda_init": "0.001", "feasibility": "0.99", "patience": "5",
        "sample_count": "128", "seed": "9",
    },
    "sweep": {
        "sizes": "200,350,500,650",
        "epochs": "15",
        "plateau_asr": "0.9",
    },
    "run": {
        "seed": "0",
    },
}


@dataclass
class PipelineConfig:
    sections: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path):
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config {path}: {e}")
        sections = {name: dict(vals) for name, vals in _DEFAULTS.items()}
        for name in parser.sections():
            if name not in sections:
                raise ConfigError(f"unknown config section [{name}]")
            for key, value in parser.items(name):
                if key not in sections[name]:
                    raise ConfigError(f"unknown config key {key!r} in section [{name}]")
                sections[name][key] = value
        cfg = cls(sections)
        cfg.validate()
        return cfg

    @classmethod
    def defaults(cls):
        return cls({name: dict(vals) for name, vals in _DEFAULTS.items()})

    def get(self, section, key):
        return self.sections[section][key]

    def get_int(self, section, key):
        try:
            return int(self.sections[section][key])
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be an integer, "
                              f"got {self.sections[section][key]!r}")

    def get_float(self, section, key):
        try:
            return float(self.sections[section][key])
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number, "
                              f"got {self.sections[section][key]!r}")

    def validate(self):
        family = self.get("attack", "family")
        if family not in ("stego", "l2", "l0", "linf"):
            raise ConfigError(f"[attack] family must be stego|l2|l0|linf, got {family!r}")
        mode = self.get("poison", "mode")
        if mode not in ("single-target", "universal", "injection-all"):
            raise ConfigError(f"[poison] mode invalid: {mode!r}")
        if family == "stego" and mode == "universal":
            raise ConfigError("stego attacks are single-target or injection-all")
        src = self.get("dataset", "source")
        if src not in ("synthetic", "idx"):
            raise ConfigError(f"[dataset] source must be synthetic|idx, got {src!r}")
        if src == "idx" and not (self.get("dataset", "idx_images") and self.get("dataset", "idx_labels")):
            raise ConfigError("[dataset] idx source needs idx_images and idx_labels paths")
        for sec, key in (("poison", "rate"), ("retrain", "lr"), ("pretrain", "lr")):
            if self.get_float(sec, key) <= 0:
                raise ConfigError(f"[{sec}] {key} must be positive")

    def canonical(self):
        lines = []
        for name in sorted(self.sections):
            for key in sorted(self.sections[name]):
                lines.append(f"{name}.{key}={self.sections[name][key]}")
        return "\n".join(lines)

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


# ----------------------------------------------------------------- helpers

def _paths(outdir):
    return {
        "train": os.path.join(outdir, "train.bkd"),
        "val": os.path.join(outdir, "val.bkd"),
        "manifest": os.path.join(outdir, "train.manifest"),
        "baseline": os.path.join(outdir, "baseline.bkm"),
        "backdoored": os.path.join(outdir, "backdoored.bkm"),
        "trigger": os.path.join(outdir, "trigger.bkt"),
        "trigger_log": os.path.join(outdir, "trigger.log"),
        "poisoned": os.path.join(outdir, "poisoned.bkd"),
        "poisoned_manifest": os.path.join(outdir, "poisoned.manifest"),
        "poisoned_val": os.path.join(outdir, "poisoned_val.bkd"),
        "report": os.path.join(outdir, "report.txt"),
        "sweep_report": os.path.join(outdir, "sweep_report.txt"),
        "sweep_grid": os.path.join(outdir, "sweep_grid.csv"),
        "detect_report": os.path.join(outdir, "detect_report.txt"),
    }


def _need(path, what):
    if not os.path.exists(path):
        raise ArtifactError(f"missing {what}: {path}")
    return path


def _check_hash(stamp, cfg, what, force):
    if not force and stamp and stamp != cfg.hash():
        raise ArtifactError(f"{what} was produced by config {stamp}, current is "
                            f"{cfg.hash()} (use --force to mix)")


def _write_report(path, pairs):
    with open(path, "w", encoding="utf-8") as f:
        for key, value in pairs:
            f.write(f"{key}={value}\n")


def _load_bundle(cfg, paths):
    train = dio.load_dataset(_need(paths["train"], "training set"))
    val = dio.load_dataset(_need(paths["val"], "validation set"))
    manifest = dio.load_manifest(_need(paths["manifest"], "dataset manifest"))
    classes = cfg.get_int("dataset", "classes")
    return dio.DataBundle(train, val, manifest.name, classes,
                          cfg.get_int("dataset", "seed")), manifest


def _dataset(cfg):
    if cfg.get("dataset", "source") == "idx":
        full = dio.load_idx(cfg.get("dataset", "idx_images"), cfg.get("dataset", "idx_labels"))
        n_val = max(1, len(full) // 6)
        train = dio.Dataset(full.images[:-n_val], full.labels[:-n_val])
        val = dio.Dataset(full.images[-n_val:], full.labels[-n_val:])
        classes = int(full.labels.max()) + 1
        return dio.DataBundle(train, val, "idx", classes, 0)
    spec = dio.SyntheticSpec(
        classes=cfg.get_int("dataset", "classes"),
        height=cfg.get_int("dataset", "height"),
        width=cfg.get_int("dataset", "width"),
        channels=cfg.get_int("dataset", "channels"),
        train_per_class=cfg.get_int("dataset", "train_per_class"),
        val_per_class=cfg.get_int("dataset", "val_per_class"),
        noise=cfg.get_int("dataset", "noise"),
        contrast=cfg.get_int("dataset", "contrast"),
        seed=cfg.get_int("dataset", "seed"))
    bundle, _ = dio.gen_synthetic(spec)
    return bundle


def _arch(cfg, bundle):
    filters = tuple(int(v) for v in cfg.get("arch", "conv_filters").split(","))
    return mod.ArchConfig(
        height=bundle.train.images.shape[1],
        width=bundle.train.images.shape[2],
        channels=bundle.train.images.shape[3],
        conv_filters=filters,
        kernel=cfg.get_int("arch", "kernel"),
        hidden=cfg.get_int("arch", "hidden"),
        classes=bundle.classes,
        seed=cfg.get_int("arch", "seed"))


def _schedule(cfg):
    return topt.OptSchedule(
        phase1_iteration_cap=cfg.get_int("attack", "phase1_cap"),
        lr=cfg.get_float("attack", "lr"),
        lr_decay=cfg.get_float("attack", "lr_decay"),
        linf_threshold_init=cfg.get_float("attack", "rho_init"),
        linf_threshold_decay=cfg.get_float("attack", "rho_decay"),
        seed=cfg.get_int("attack", "seed"))


def _payload(cfg, size=None):
    return stg.make_text_trigger(cfg.get("attack", "payload"),
                                 size or cfg.get_int("attack", "payload_size"))


def _stego_cfg(cfg):
    return stg.StegoConfig(cfg.get_int("attack", "bits_per_byte"))


# ------------------------------------------------------------------ stages

def stage_pretrain(cfg, outdir, force=False):
    paths = _paths(outdir)
    os.makedirs(outdir, exist_ok=True)
    bundle = _dataset(cfg)
    dio.save_dataset(bundle.train, paths["train"])
    dio.save_dataset(bundle.val, paths["val"])
    manifest = dio.manifest_for(bundle.train, bundle.name, bundle.classes, bundle.seed,
                                config_hash=cfg.hash())
    dio.save_manifest(manifest, paths["manifest"])
    model = mod.build_model(_arch(cfg, bundle))
    tc = mod.TrainConfig(epochs=cfg.get_int("pretrain", "epochs"),
                         batch_size=cfg.get_int("pretrain", "batch_size"),
                         lr=cfg.get_float("pretrain", "lr"),
                         seed=cfg.get_int("pretrain", "seed"))
    trained, val_acc = mod.pretrain(model, bundle, tc)
    trained.provenance["config_hash"] = cfg.hash()
    dio.save_model(trained, paths["baseline"])
    report = [("stage", "pretrain"), ("config_hash", cfg.hash()),
              ("dataset", bundle.name), ("val_accuracy", f"{val_acc:.6f}")]
    _write_report(paths["report"], report)
    return {"val_accuracy": val_acc, "paths": paths}


def stage_gen_trigger(cfg, outdir, force=False):
    paths = _paths(outdir)
    family = cfg.get("attack", "family")
    if family == "stego":
        raise ConfigError("gen-trigger applies to l2|l0|linf attack families")
    baseline = dio.load_model(_need(paths["baseline"], "baseline model"))
    _check_hash(baseline.provenance.get("config_hash", ""), cfg, "baseline model", force)
    anchor = topt.find_anchor(baseline, cfg.get_int("poison", "target"),
                              count=cfg.get_int("attack", "anchor_count"),
                              scale=cfg.get_float("attack", "scale"))
    schedule = _schedule(cfg)
    if family == "l2":
        trig = topt.gen_trigger_l2(baseline, anchor, schedule,
                                   stop_norm=cfg.get_float("attack", "stop_norm"))
    elif family == "linf":
        trig = topt.gen_trigger_linf(baseline, anchor, schedule,
                                     stop_threshold=cfg.get_float("attack", "stop_threshold"))
    else:
        trig = topt.gen_trigger_l0(baseline, anchor, schedule,
                                   keep_pixels=cfg.get_int("attack", "keep_pixels"))
    trig.log.insert(0, f"config_hash={cfg.hash()}")
    dio.save_trigger(trig, paths["trigger"])
    with open(paths["trigger_log"], "w", encoding="utf-8") as f:
        f.write("\n".join(trig.log) + "\n")
    return {"trigger": trig, "paths": paths}


def _build_poisoned(cfg, bundle, paths, force):
    mode = cfg.get("poison", "mode")
    family = cfg.get("attack", "family")
    seed = cfg.get_int("poison", "seed")
    rate = cfg.get_float("poison", "rate")
    target = cfg.get_int("poison", "target")
    if mode == "single-target":
        spec = poi.PoisonSpec(mode=mode, source=cfg.get_int("poison", "source"),
                              target=target, rate=rate, seed=seed)
        if family == "stego":
            return poi.poison_single_target(bundle, _payload(cfg), _stego_cfg(cfg), spec)
        raise ConfigError("single-target poisoning is steganographic in this pipeline")
    if mode == "universal":
        trig = dio.load_trigger(_need(paths["trigger"], "additive trigger"),
                                expect_shape=bundle.train.image_shape)
        spec = poi.PoisonSpec(mode=mode, target=target, rate=rate, seed=seed)
        return poi.poison_universal(bundle, trig, spec)
    # injection-all: distinct text payloads per class
    base = cfg.get("attack", "payload")
    size = cfg.get_int("attack", "payload_size")
    triggers = [stg.make_text_trigger(f"{base}{c}", size) for c in range(bundle.classes)]
    return poi.poison_injection_all(bundle, triggers, rate, seed=seed,
                                    stego_cfg=_stego_cfg(cfg))


def stage_poison(cfg, outdir, force=False):
    paths = _paths(outdir)
    bundle, manifest = _load_bundle(cfg, paths)
    _check_hash(manifest.config_hash, cfg, "dataset", force)
    pd = _build_poisoned(cfg, bundle, paths, force)
    mixed = dio.Dataset(pd.images, pd.labels)
    dio.save_dataset(mixed, paths["poisoned"])
    pm = dio.manifest_for(mixed, f"{bundle.name}-poisoned", bundle.classes,
                          cfg.get_int("poison", "seed"),
                          provenance=list(pd.provenance),
                          original_labels=pd.original_labels,
                          config_hash=cfg.hash())
    dio.save_manifest(pm, paths["poisoned_manifest"])
    dio.save_dataset(pd.poisoned_val, paths["poisoned_val"])
    return {"poisoned": pd, "paths": paths}


def stage_retrain(cfg, outdir, force=False):
    paths = _paths(outdir)
    baseline = dio.load_model(_need(paths["baseline"], "baseline model"))
    _check_hash(baseline.provenance.get("config_hash", ""), cfg, "baseline model", force)
    mixed = dio.load_dataset(_need(paths["poisoned"], "poisoned training set"))
    pmanifest = dio.load_manifest(_need(paths["poisoned_manifest"], "poisoned manifest"))
    _check_hash(pmanifest.config_hash, cfg, "poisoned dataset", force)
    pval = dio.load_dataset(_need(paths["poisoned_val"], "poisoned validation set"))
    tc = mod.TrainConfig(epochs=cfg.get_int("retrain", "epochs"),
                         batch_size=cfg.get_int("retrain", "batch_size"),
                         lr=cfg.get_float("retrain", "lr"),
                         seed=cfg.get_int("retrain", "seed"))
    stop = cfg.get_float("retrain", "stop_asr")
    target = cfg.get_int("poison", "target")
    asr_eval = None if cfg.get("poison", "mode") == "injection-all" \
        else (pval.images, target)
    result = mod.retrain(baseline, mixed, tc, asr_eval=asr_eval,
                         stop_asr=stop if asr_eval else None)
    result.model.provenance["config_hash"] = cfg.hash()
    dio.save_model(result.model, paths["backdoored"])
    report = [("stage", "retrain"), ("config_hash", cfg.hash()),
              ("epochs_run", result.epochs_run)]
    for i, a in enumerate(result.epoch_asr):
        report.append((f"asr_epoch_{i + 1}", f"{a:.6f}"))
    _write_report(paths["report"], report)
    return {"result": result, "paths": paths}


def _epochs_to_converge(asr_log, plateau, cap):
    for i, a in enumerate(asr_log):
        if a >= plateau:
            return i + 1
    return cap + 1


def stage_eval(cfg, outdir, force=False):
    paths = _paths(outdir)
    bundle, manifest = _load_bundle(cfg, paths)
    _check_hash(manifest.config_hash, cfg, "dataset", force)
    backdoored = dio.load_model(_need(paths["backdoored"], "backdoored model"))
    _check_hash(backdoored.provenance.get("config_hash", ""), cfg, "backdoored model", force)
    baseline = dio.load_model(_need(paths["baseline"], "baseline model"))
    pval = dio.load_dataset(_need(paths["poisoned_val"], "poisoned validation set"))
    target = cfg.get_int("poison", "target")

    func = met.functionality(backdoored, bundle.val.images, bundle.val.labels)
    base_acc = met.functionality(baseline, bundle.val.images, bundle.val.labels)
    asr = met.attack_success_rate(backdoored, pval.images, target)

    n_pass = min(cfg.get_int("eval", "pass_samples"), len(pval))
    mode = cfg.get("poison", "mode")
    if mode == "single-target":
        src = cfg.get_int("poison", "source")
        clean_ref = bundle.val.images[bundle.val.labels == src][:n_pass]
    else:
        clean_ref = bundle.val.images[:n_pass]
    scores = [met.pass_score(pval.images[i], clean_ref[i])
              for i in range(min(n_pass, len(clean_ref)))]
    avg_pass = float(np.mean(scores))

    epochs = []
    if os.path.exists(paths["report"]):
        with open(paths["report"], encoding="utf-8") as f:
            for line in f:
                if line.startswith("asr_epoch_"):
                    epochs.append(float(line.strip().split("=")[1]))
    e2c = _epochs_to_converge(epochs, cfg.get_float("sweep", "plateau_asr"),
                              cfg.get_int("retrain", "epochs"))
    report = [("stage", "eval"), ("config_hash", cfg.hash()),
              ("baseline_accuracy", f"{base_acc:.6f}"),
              ("functionality", f"{func:.6f}"),
              ("attack_success_rate", f"{asr:.6f}"),
              ("avg_pass", f"{avg_pass:.6f}"),
              ("epochs_to_converge", e2c)]
    _write_report(paths["report"], report)
    return {"functionality": func, "asr": asr, "avg_pass": avg_pass,
            "baseline_accuracy": base_acc, "epochs_to_converge": e2c, "paths": paths}


def stage_detect(cfg, outdir, force=False):
    paths = _paths(outdir)
    bundle, manifest = _load_bundle(cfg, paths)
    _check_hash(manifest.config_hash, cfg, "dataset", force)
    backdoored = dio.load_model(_need(paths["backdoored"], "backdoored model"))
    _check_hash(backdoored.provenance.get("config_hash", ""), cfg, "backdoored model", force)
    dc = det.DetectConfig(epochs=cfg.get_int("detect", "epochs"),
                          batch_size=cfg.get_int("detect", "batch_size"),
                          lr=cfg.get_float("detect", "lr"),
                          lambda_init=cfg.get_float("detect", "lambda_init"),
                          feasibility=cfg.get_float("detect", "feasibility"),
                          patience=cfg.get_int("detect", "patience"),
                          sample_count=cfg.get_int("detect", "sample_count"),
                          seed=cfg.get_int("detect", "seed"))
    report = det.detect_backdoor(backdoored, bundle.val.images, bundle.val.labels, dc)
    lines = [("stage", "detect"), ("config_hash", cfg.hash()),
             ("flagged", ",".join(str(i) for i in report.flagged) or "none")]
    for i, (norm, idx) in enumerate(zip(report.l1_norms, report.anomaly_indices)):
        lines.append((f"label_{i}", f"l1={norm:.6f} anomaly={idx:.6f}"))
    _write_report(paths["detect_report"], lines)
    for i, rt in enumerate(report.triggers):
        trig = topt.AdditiveTrigger(
            perturbation=rt.pattern * rt.mask[:, :, None],
            mask=None, norm_kind="l2",
            norm_value=float(np.sqrt(np.sum((rt.pattern * rt.mask[:, :, None]) ** 2))),
            log=[f"recovered_for_label={i} l1={rt.l1_norm:.6f} feasible={rt.feasible}"])
        dio.save_trigger(trig, os.path.join(outdir, f"recovered_{i}.bkt"))
    return {"report": report, "paths": paths}


def stage_sweep(cfg, outdir, force=False):
    """Payload-size sweep of the steganographic single-target attack."""
    paths = _paths(outdir)
    os.makedirs(outdir, exist_ok=True)
    bundle = _dataset(cfg)
    baseline = dio.load_model(_need(paths["baseline"], "baseline model"))
    _check_hash(baseline.provenance.get("config_hash", ""), cfg, "baseline model", force)
    sizes = [int(s) for s in cfg.get("sweep", "sizes").split(",")]
    epochs = cfg.get_int("sweep", "epochs")
    plateau = cfg.get_float("sweep", "plateau_asr")
    target = cfg.get_int("poison", "target")
    rows = []
    for size in sizes:
        payload = _payload(cfg, size=size)
        spec = poi.PoisonSpec(mode="single-target",
                              source=cfg.get_int("poison", "source"),
                              target=target,
                              rate=cfg.get_float("poison", "rate"),
                              seed=cfg.get_int("poison", "seed"))
        pd = poi.poison_single_target(bundle, payload, _stego_cfg(cfg), spec)
        tc = mod.TrainConfig(epochs=epochs,
                             batch_size=cfg.get_int("retrain", "batch_size"),
                             lr=cfg.get_float("retrain", "lr"),
                             seed=cfg.get_int("retrain", "seed"))
        result = mod.retrain(baseline, pd, tc, asr_eval=(pd.poisoned_val.images, target),
                             stop_asr=plateau)
        final_asr = result.epoch_asr[-1]
        func = met.functionality(result.model, bundle.val.images, bundle.val.labels)
        src_val = bundle.val.images[bundle.val.labels == cfg.get_int("poison", "source")]
        n_pass = min(cfg.get_int("eval", "pass_samples"), len(src_val))
        avg_pass = float(np.mean([met.pass_score(pd.poisoned_val.images[i], src_val[i])
                                  for i in range(n_pass)]))
        e2c = _epochs_to_converge(result.epoch_asr, plateau, epochs)
        rows.append({"size": size, "asr": final_asr, "functionality": func,
                     "avg_pass": avg_pass, "epochs_to_converge": e2c})
    lines = [("stage", "sweep"), ("config_hash", cfg.hash())]
    for r in rows:
        lines.append((f"size_{r['size']}",
                      f"asr={r['asr']:.6f} functionality={r['functionality']:.6f} "
                      f"avg_pass={r['avg_pass']:.6f} epochs_to_converge={r['epochs_to_converge']}"))
    _write_report(paths["sweep_report"], lines)
    with open(paths["sweep_grid"], "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["size", "asr", "functionality",
                                               "avg_pass", "epochs_to_converge"])
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
    return {"rows": rows, "paths": paths}


def stage_run(cfg, outdir, force=False):
    """Full pipeline: pretrain, trigger (if additive), poison, retrain, eval."""
    out = {}
    out.update(stage_pretrain(cfg, outdir, force))
    if cfg.get("attack", "family") != "stego":
        out.update(stage_gen_trigger(cfg, outdir, force))
    out.update(stage_poison(cfg, outdir, force))
    out.update(stage_retrain(cfg, outdir, force))
    out.update(stage_eval(cfg, outdir, force))
    paths = _paths(outdir)
    eval_pairs = []
    with open(paths["report"], encoding="utf-8") as f:
        eval_pairs = [tuple(line.strip().split("=", 1)) for line in f if line.strip()]
    run_pairs = [("stage", "run"), ("config_hash", cfg.hash())] + \
        [(k, v) for k, v in eval_pairs if k not in ("stage", "config_hash")]
    _write_report(paths["report"], run_pairs)
    return out


STAGES = {
    "pretrain": stage_pretrain,
    "gen-trigger": stage_gen_trigger,
    "poison": stage_poison,
    "retrain": stage_retrain,
    "eval": stage_eval,
    "detect": stage_detect,
    "sweep": stage_sweep,
    "run": stage_run,
}

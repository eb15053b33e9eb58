"""Sectioned key=value run configuration.

Every key has a typed default; files override a subset and unknown sections
or keys are rejected. ``RunConfig.dump()`` writes the fully resolved
configuration in a form ``load_config`` reads back to the same values.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


# section -> key -> (parser, default text)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, "0"),
        "out": (str, "rgenima-out"),
        "threads": (int, "1"),
    },
    "paths": {
        "genotypes": (str, ""),
        "panel": (str, ""),
        "roi_table": (str, ""),
        "atlas": (str, ""),
        "volumes": (str, ""),
        "reference_genes": (str, ""),
    },
    "synth": {
        "n_per_stage": (int, "60"),
        "n_genes": (int, "10"),
        "snps_per_gene": (int, "5"),
        "n_rois": (int, "12"),
        "cell_size": (int, "12"),
        "plants_per_stage": (int, "3"),
        "effect": (float, "2.0"),
        "noise_sd": (float, "0.4"),
        "gene_shift": (float, "0.1"),
        "missing_rate": (float, "0.01"),
    },
    "qc": {
        "missingness_max": (float, "0.95"),
        "maf_min": (float, "0.05"),
        "hwe_p_min": (float, "1e-6"),
    },
    "dataset": {
        "mode": (str, "image_gene"),
        "train_count": (int, "720"),
        "test_count": (int, "120"),
        "test_fraction": (float, "0.25"),
        "patch_size": (int, "8"),
    },
    "model": {
        "d_model": (int, "32"),
        "n_heads": (int, "2"),
        "n_layers_text": (int, "2"),
        "n_layers_rit": (int, "1"),
    },
    "train": {
        "lr": (float, "0.003"),
        "beta1": (float, "0.9"),
        "beta2": (float, "0.999"),
        "adam_eps": (float, "1e-8"),
        "epochs": (int, "10"),
        "batch_size": (int, "16"),
        "rit_lr": (float, "0.003"),
        "rit_epochs": (int, "30"),
        "rit_batch_size": (int, "16"),
        "max_steps": (int, "0"),
    },
    "eval": {
        "max_len": (int, "8"),
    },
    "stability": {
        "n_bootstrap": (int, "1000"),
        "ci_lo": (float, "2.5"),
        "ci_hi": (float, "97.5"),
        "selection_threshold": (float, "0.5"),
        "top_k_genes": (int, "3"),
        "top_k_rois": (int, "3"),
        "epsilon_width": (float, "1e-12"),
        "groups": (str, "SMC,MCI,AD"),
    },
    "plotdata": {
        "rois": (str, "stable"),
        "annotate_per_roi": (int, "2"),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)
    raw: dict[str, dict[str, str]] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def set(self, section: str, key: str, text: str) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        parser = SCHEMA[section][key][0]
        try:
            value = parser(text)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {text!r}: {exc}") from None
        self.values.setdefault(section, {})[key] = value
        self.raw.setdefault(section, {})[key] = text

    def dump(self) -> str:
        buf = io.StringIO()
        for section in SCHEMA:
            buf.write(f"[{section}]\n")
            for key in SCHEMA[section]:
                buf.write(f"{key} = {self.raw[section][key]}\n")
            buf.write("\n")
        return buf.getvalue()


def default_config() -> RunConfig:
    cfg = RunConfig()
    for section, keys in SCHEMA.items():
        for key, (_, text) in keys.items():
            cfg.set(section, key, text)
    return cfg


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="\x00no-defaults")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = default_config()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, text_value in cp.items(section):
            cfg.set(section, key, text_value.strip())
    _check(cfg)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


def _check(cfg: RunConfig) -> None:
    if cfg["run"]["threads"] < 1:
        raise ConfigError("[run] threads must be at least 1")
    if cfg["run"]["seed"] < 0:
        raise ConfigError("[run] seed must be non-negative")
    for key in ("missingness_max", "maf_min", "hwe_p_min"):
        if not 0.0 < cfg["qc"][key] < 1.0:
            raise ConfigError(f"[qc] {key} must lie in (0, 1)")
    if cfg["dataset"]["mode"] not in ("gene_only", "image_gene", "mixture"):
        raise ConfigError(f"[dataset] mode {cfg['dataset']['mode']!r} is not gene_only, image_gene or mixture")
    for section in ("synth", "model", "train", "stability"):
        for key, value in cfg[section].items():
            if isinstance(value, (int, float)) and value < 0:
                raise ConfigError(f"[{section}] {key} must be non-negative")

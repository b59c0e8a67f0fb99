"""Flat key=value run configuration.

Two named profiles carry the default constant sets: ``desk`` (scaled-down
images, shorter schedules, everything runnable on CPU in minutes) and
``paper`` (full-scale constants). A config file overrides profile
defaults; command-line ``--set key=value`` flags override the file.
Unknown keys are rejected. Every run directory receives the fully
resolved config.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def _log_uniform(text):
    return float(text)


# key -> (parser, desk default, paper default)
KEYS = {
    "profile": (str, "desk", "paper"),

    "data.exams": (int, 2000, 229426),
    "data.cc_height": (int, 224, 2677),
    "data.cc_width": (int, 162, 1942),
    "data.mlo_height": (int, 248, 2974),
    "data.mlo_width": (int, 146, 1748),
    "data.biopsied_fraction": (float, 0.025, 0.025),
    "data.malignant_fraction": (float, 0.17, 0.17),
    "data.both_fraction": (float, 0.02, 0.02),
    "data.bilateral_fraction": (float, 0.08, 0.08),
    "data.occult_fraction": (float, 0.328, 0.328),
    "data.split_train": (float, 0.6, 0.6),
    "data.split_val": (float, 0.2, 0.2),
    "data.split_test": (float, 0.2, 0.2),
    "data.multi_exam_fraction": (float, 0.05, 0.05),
    "data.birads_noise": (float, 0.1, 0.1),
    "data.lesion_min_frac": (float, 0.075, 0.075),
    "data.lesion_max_frac": (float, 0.150, 0.150),
    "data.density_coupling": (float, 0.2, 0.2),

    "patch.size": (int, 64, 256),
    "patch.side_min": (float, 32.0, 128.0),
    "patch.side_max": (float, 96.0, 384.0),
    "patch.max_angle": (float, 30.0, 30.0),
    "patch.plan": (str, "150,200,850,800", "20,35,5000,4945"),
    "patch.pool_targets": (str, "600,800,1800,1800",
                           "50000,80000,2500000,2400000"),
    "patch.epochs": (int, 20, 2000),
    "patch.save_every": (int, 5, 200),
    "patch.batch_size": (int, 100, 100),
    "patch.lr": (float, 5e-4, 1e-5),
    "patch.l2": (_log_uniform, 10 ** -4.5, 10 ** -4.5),
    "patch.select_exams": (int, 48, 0),     # 0 = full validation split

    "heatmap.stride": (int, 18, 70),

    "model.variant": (str, "view_wise", "view_wise"),
    "model.input_channels": (int, 1, 1),

    "train.lr": (float, 2e-4, 1e-5),
    "train.batch_size": (int, 4, 4),
    "train.birads_batch_size": (int, 24, 24),
    "train.l2": (_log_uniform, 10 ** -4.5, 10 ** -4.5),
    "train.patience": (int, 20, 20),
    "train.max_epochs": (int, 60, 1000),
    "train.max_offset": (int, 8, 100),
    "train.tta_samples": (int, 10, 10),
    "train.ensemble_size": (int, 5, 5),
    "train.epoch_exams": (int, 0, 0),        # 0 = all subsampled exams
    "train.val_exams": (int, 0, 0),          # 0 = full validation split
    "train.birads_epoch_exams": (int, 0, 0),

    "eval.population": (str, "all", "all"),
    "eval.readers": (int, 14, 14),
    "eval.reader_auc_low": (float, 0.705, 0.705),
    "eval.reader_auc_high": (float, 0.860, 0.860),
    "eval.reader_biopsied": (int, 0, 368),   # 0 = every biopsied test exam
    "eval.reader_clean": (int, 0, 372),      # 0 = match the biopsied count
    "eval.hybrid_lambda": (float, 0.5, 0.5),
}

PROFILES = ("desk", "paper")


class RunConfig:
    def __init__(self, values):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key):
        return self.values[key]

    def ints(self, key):
        return tuple(int(x) for x in str(self.values[key]).split(","))

    def dataset_config(self):
        from .phantom import DatasetConfig
        v = self.values
        return DatasetConfig(
            exams=v["data.exams"],
            cc_dims=(v["data.cc_height"], v["data.cc_width"]),
            mlo_dims=(v["data.mlo_height"], v["data.mlo_width"]),
            biopsied_fraction=v["data.biopsied_fraction"],
            malignant_fraction=v["data.malignant_fraction"],
            both_fraction=v["data.both_fraction"],
            bilateral_fraction=v["data.bilateral_fraction"],
            occult_fraction=v["data.occult_fraction"],
            split_fractions=(v["data.split_train"], v["data.split_val"],
                             v["data.split_test"]),
            multi_exam_fraction=v["data.multi_exam_fraction"],
            birads_noise=v["data.birads_noise"],
            lesion_frac_range=(v["data.lesion_min_frac"],
                               v["data.lesion_max_frac"]),
            density_coupling=v["data.density_coupling"])

    def dump(self, path):
        with open(path, "w") as f:
            for key in sorted(self.values):
                f.write(f"{key}={self.values[key]}\n")


def parse_file(path):
    raw = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def resolve(file_values=None, overrides=None):
    """Profile defaults <- config file <- CLI overrides, typed and checked."""
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    merged_raw = dict(file_values)
    merged_raw.update(overrides)

    for key in merged_raw:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")

    profile = str(merged_raw.get("profile", "desk"))
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r} (choose from {PROFILES})")
    col = 1 if profile == "desk" else 2

    values = {key: spec[col] for key, spec in KEYS.items()}
    values["profile"] = profile
    for key, raw in merged_raw.items():
        parser = KEYS[key][0]
        try:
            values[key] = parser(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
    return RunConfig(values)


def load(path=None, overrides=None):
    file_values = parse_file(path) if path else {}
    return resolve(file_values, overrides)

"""Procedural four-view phantom screening exams.

Each exam is four 16-bit PGM images (R-CC, L-CC, R-MLO, L-MLO) of a
synthetic breast: a half-ellipse silhouette for CC views, an additional
pectoral wedge for MLO views, fibroglandular texture scaled by a density
attribute, and zero background. Findings are drawn as masses,
calcification clusters, or asymmetries; the malignant/benign distinction
is carried by an explicit margin-irregularity knob so the classes are
separable by construction. This is a stand-in corpus with known ground
truth, not a claim of anatomical realism.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .pgm import read_pgm, write_pgm8, write_pgm16
from .resample import gaussian_blur
from .seeding import substream

VIEWS = ("rcc", "lcc", "rmlo", "lmlo")
AGE_BANDS = ("<40", "40s", "50s", "60s", "70+")
DENSITIES = ("fatty", "scattered", "heterogeneous", "extreme")
MANIFEST_HEADER = ("exam_id,patient_id,split,age_band,density,"
                   "left_benign,left_malignant,right_benign,right_malignant,"
                   "left_biopsied,right_biopsied,left_occult,right_occult,"
                   "birads,rcc_path,lcc_path,rmlo_path,lmlo_path")

_AGE_P = (0.10, 0.30, 0.30, 0.20, 0.10)
_DENSITY_P = (0.10, 0.40, 0.40, 0.10)
_DENSITY_CONTRAST = {"fatty": 0.55, "scattered": 1.0,
                     "heterogeneous": 1.6, "extreme": 2.3}
MAXVAL = 65535


class GeneratorError(RuntimeError):
    pass


@dataclass
class LesionSpec:
    kind: str                 # mass | calcification_cluster | asymmetry
    malignancy: str           # benign | malignant
    center: tuple             # (u, v): chest-wall depth in [0,1], lateral in [-1,1]
    size_px: float
    irregularity: float       # >= 0.5 iff malignant
    shape_seed: int = 0       # shared by both views so supports agree

    def __post_init__(self):
        mal = self.malignancy == "malignant"
        if mal != (self.irregularity >= 0.5):
            raise ValueError("irregularity must be >= 0.5 exactly for malignant lesions")


@dataclass
class BreastSpec:
    benign: int = 0
    malignant: int = 0
    biopsied: int = 0
    occult: int = 0
    lesions: list = field(default_factory=list)


@dataclass
class ExamSpec:
    exam_id: str
    patient_id: str
    split: str
    age_band: str
    density: str
    left: BreastSpec
    right: BreastSpec
    seed: int = 0
    density_coupling: float = 0.2


@dataclass
class ExamRecord:
    exam_id: str
    patient_id: str
    split: str
    age_band: str
    density: str
    left_benign: int
    left_malignant: int
    right_benign: int
    right_malignant: int
    left_biopsied: int
    right_biopsied: int
    left_occult: int
    right_occult: int
    birads: int
    view_paths: dict

    def labels(self, side):
        """(benign, malignant) for side 'L' or 'R'."""
        if side == "L":
            return self.left_benign, self.left_malignant
        return self.right_benign, self.right_malignant

    def biopsied(self, side):
        return self.left_biopsied if side == "L" else self.right_biopsied

    def occult(self, side):
        return self.left_occult if side == "L" else self.right_occult


@dataclass
class DatasetConfig:
    exams: int = 2000
    cc_dims: tuple = (224, 162)   # H, W
    mlo_dims: tuple = (248, 146)
    biopsied_fraction: float = 0.025
    malignant_fraction: float = 0.17   # among biopsied exams
    both_fraction: float = 0.02        # biopsied breasts carrying both findings
    bilateral_fraction: float = 0.08   # biopsied exams with both breasts biopsied
    occult_fraction: float = 0.328     # among biopsied exams
    split_fractions: tuple = (0.6, 0.2, 0.2)
    multi_exam_fraction: float = 0.05  # patients contributing two exams
    birads_noise: float = 0.1
    lesion_frac_range: tuple = (0.075, 0.150)  # lesion size vs min image extent
    density_coupling: float = 0.2      # contrast loss of lesions in dense breasts

    def validate(self):
        if min(min(self.cc_dims), min(self.mlo_dims)) < 32:
            raise GeneratorError("image dims too small for requested lesion sizes")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise GeneratorError("split fractions must sum to 1")


# ---------------------------------------------------------------------------
# silhouettes and lesion fields

def _silhouette(dims, mlo, geo):
    """Boolean breast region for a rightward-oriented breast (chest wall at
    x=0) plus the placement geometry (cy, ry, rx)."""
    h, w = dims
    ry = (geo["ry_mlo"] if mlo else geo["ry_cc"]) * h
    rx = (geo["rx_mlo"] if mlo else geo["rx_cc"]) * w
    cy = h * (0.55 if mlo else 0.5)
    yy, xx = np.mgrid[0:h, 0:w]
    mask = ((xx / rx) ** 2 + ((yy - cy) / ry) ** 2) <= 1.0
    if mlo:
        mask |= _pectoral_wedge(dims, geo)
    return mask, cy, ry, rx


def _pectoral_wedge(dims, geo):
    h, w = dims
    yy, xx = np.mgrid[0:h, 0:w]
    ph = geo["pec_h"] * h
    pw = geo["pec_w"] * w
    return (yy < ph) & (xx < pw * (1.0 - yy / ph))


def _lesion_center_px(center, cy, ry, rx):
    u, v = center
    return cy + v * ry * 0.68, u * rx * 0.80


def _mass_field(dims, center, size_px, irregularity, amp, rng):
    """Mass with a soft blob core shared by both classes; irregular masses
    additionally carry fine interior speckle and thin radial spicules, i.e.
    the class signal lives in high-frequency structure rather than in
    brightness or extent."""
    h, w = dims
    base_r = size_px / 2.0
    malignant = irregularity >= 0.5
    wobble = 0.08 + 0.50 * irregularity
    nterms = 3 if not malignant else 6
    ks = rng.integers(3, 9, size=nterms)
    phases = rng.uniform(0, 2 * math.pi, size=nterms)
    coef = rng.uniform(0.3, 1.0, size=nterms)
    coef /= coef.sum()
    edge = base_r * (0.45 if not malignant else 0.12)
    pad = int(base_r * (1 + wobble) + edge + 3)

    cy, cx = center
    y0, y1 = max(0, int(cy) - pad), min(h, int(cy) + pad + 1)
    x0, x1 = max(0, int(cx) - pad), min(w, int(cx) + pad + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy = yy - cy
    dx = xx - cx
    rho = np.hypot(dy, dx)
    phi = np.arctan2(dy, dx)
    margin = base_r * (1.0 + wobble * sum(
        c * np.sin(k * phi + p) for c, k, p in zip(coef, ks, phases)))
    profile = np.clip((margin - rho) / max(edge, 1e-6), 0.0, 1.0)
    field = amp * profile ** 1.5

    if malignant:
        # interior speckle: a granular texture cue on top of the spiky margin
        n_speck = int(rng.integers(6, 12))
        for _ in range(n_speck):
            ang = rng.uniform(0, 2 * math.pi)
            rad = rng.uniform(0, 0.7) * base_r
            sy, sx = cy + rad * math.sin(ang), cx + rad * math.cos(ang)
            pr = rng.uniform(0.9, 1.5)
            d2 = (yy - sy) ** 2 + (xx - sx) ** 2
            speck = amp * 1.6 * np.exp(-0.5 * d2 / pr ** 2)
            speck[d2 > (2.2 * pr) ** 2] = 0.0
            field = np.maximum(field, speck)

    out = np.zeros(dims)
    out[y0:y1, x0:x1] = field
    return out


def _calc_field(dims, center, size_px, irregularity, amp, rng):
    """Cluster of bright specks: many fine ones when irregular (malignant),
    few coarse ones otherwise."""
    h, w = dims
    cluster_r = size_px / 2.0
    malignant = irregularity >= 0.5
    n = int(rng.integers(10, 18)) if malignant else int(rng.integers(3, 7))
    speck_r = rng.uniform(0.7, 1.3) if malignant else rng.uniform(1.6, 2.6)
    out = np.zeros(dims)
    cy, cx = center
    for _ in range(n):
        ang = rng.uniform(0, 2 * math.pi)
        rad = cluster_r * math.sqrt(rng.uniform(0, 1.0))
        sy, sx = cy + rad * math.sin(ang), cx + rad * math.cos(ang)
        pr = speck_r * rng.uniform(0.8, 1.25)
        pad = int(pr * 3 + 2)
        y0, y1 = max(0, int(sy) - pad), min(h, int(sy) + pad + 1)
        x0, x1 = max(0, int(sx) - pad), min(w, int(sx) + pad + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d2 = (yy - sy) ** 2 + (xx - sx) ** 2
        blob = amp * np.exp(-0.5 * d2 / pr ** 2)
        blob[d2 > (2.2 * pr) ** 2] = 0.0
        out[y0:y1, x0:x1] = np.maximum(out[y0:y1, x0:x1], blob)
    return out


def _asymmetry_field(dims, center, size_px, irregularity, amp, rng):
    h, w = dims
    sig_a = size_px * 0.55
    sig_b = size_px * (0.25 + 0.25 * irregularity)
    theta = rng.uniform(0, math.pi)
    pad = int(2.4 * sig_a + 2)
    cy, cx = center
    y0, y1 = max(0, int(cy) - pad), min(h, int(cy) + pad + 1)
    x0, x1 = max(0, int(cx) - pad), min(w, int(cx) + pad + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - cy, xx - cx
    a = dy * math.cos(theta) + dx * math.sin(theta)
    b = -dy * math.sin(theta) + dx * math.cos(theta)
    q = (a / sig_a) ** 2 + (b / sig_b) ** 2
    blob = amp * np.exp(-0.5 * q)
    blob[q > 2.2 ** 2] = 0.0
    out = np.zeros(dims)
    out[y0:y1, x0:x1] = blob
    return out


_FIELDS = {"mass": _mass_field,
           "calcification_cluster": _calc_field,
           "asymmetry": _asymmetry_field}


def _lesion_amp(lesion, density_idx, coupling):
    # brightness deliberately carries no class signal; the classes differ in
    # margin structure and speck granularity only
    amp = 6200.0
    amp *= 1.0 - coupling * (density_idx / 3.0) * 0.5
    if lesion.kind == "asymmetry":
        amp *= 0.55
    elif lesion.kind == "calcification_cluster":
        amp *= 2.4
    return amp


def _render_lesion(lesion, dims, sil, cy, ry, rx, density_idx, coupling, view_tag):
    """Field for one lesion in one view, or None when support leaves the
    silhouette. The shape stream restarts per view so both views draw the
    same margin."""
    center = _lesion_center_px(lesion.center, cy, ry, rx)
    amp = _lesion_amp(lesion, density_idx, coupling)
    rng = substream(lesion.shape_seed, "shape")
    fld = _FIELDS[lesion.kind](dims, center, lesion.size_px,
                               lesion.irregularity, amp, rng)
    support = fld > 0
    if not support.any() or (support & ~sil).any():
        return None
    return fld


def render_exam(spec: ExamSpec, cc_dims, mlo_dims):
    """Render all four views plus per-view benign/malignant masks.

    Returns (images, masks): images keyed by view name, masks keyed by
    (view, malignancy) holding boolean arrays (only nonempty supports).
    Occult findings are never drawn. Raises GeneratorError when a lesion
    cannot be placed inside both of its views after 100 retries.
    """
    geo_rng = substream(spec.seed, "geometry", spec.exam_id)
    geo = {
        "ry_cc": geo_rng.uniform(0.34, 0.44),
        "rx_cc": geo_rng.uniform(0.64, 0.80),
        "ry_mlo": geo_rng.uniform(0.36, 0.46),
        "rx_mlo": geo_rng.uniform(0.58, 0.74),
        "pec_h": geo_rng.uniform(0.30, 0.42),
        "pec_w": geo_rng.uniform(0.22, 0.34),
    }
    base = geo_rng.uniform(14000, 19000)
    contrast = _DENSITY_CONTRAST[spec.density]
    density_idx = DENSITIES.index(spec.density)
    sil_cc, cy_cc, ry_cc, rx_cc = _silhouette(cc_dims, False, geo)
    sil_mlo, cy_mlo, ry_mlo, rx_mlo = _silhouette(mlo_dims, True, geo)

    # resolve lesion placements once per breast against both its views
    fields = {}   # (side, malignancy) -> {False: cc field, True: mlo field}
    for side, breast in (("r", spec.right), ("l", spec.left)):
        lesions = () if breast.occult else tuple(breast.lesions)
        for li, lesion in enumerate(lesions):
            place_rng = substream(spec.seed, "place", spec.exam_id, side, li)
            cur = lesion
            pair = None
            for attempt in range(101):
                f_cc = _render_lesion(cur, cc_dims, sil_cc, cy_cc, ry_cc, rx_cc,
                                      density_idx, spec.density_coupling, "cc")
                f_mlo = _render_lesion(cur, mlo_dims, sil_mlo, cy_mlo, ry_mlo,
                                       rx_mlo, density_idx,
                                       spec.density_coupling, "mlo")
                if f_cc is not None and f_mlo is not None:
                    pair = (f_cc, f_mlo)
                    break
                cur = replace(cur, center=(place_rng.uniform(0.2, 0.75),
                                           place_rng.uniform(-0.5, 0.5)))
            if pair is None:
                raise GeneratorError(
                    f"{spec.exam_id}/{side}: lesion does not fit after 100 retries")
            key = (side, cur.malignancy)
            prev = fields.get(key, (0.0, 0.0))
            fields[key] = (prev[0] + pair[0], prev[1] + pair[1])

    images, masks = {}, {}
    for view in VIEWS:
        side = view[0]
        mlo = view.endswith("mlo")
        dims = mlo_dims if mlo else cc_dims
        sil = sil_mlo if mlo else sil_cc
        cy, ry, rx = (cy_mlo, ry_mlo, rx_mlo) if mlo else (cy_cc, ry_cc, rx_cc)

        tex_rng = substream(spec.seed, "texture", spec.exam_id, view)
        canvas = np.zeros(dims)
        canvas[sil] = base
        canvas += _texture(dims, contrast, tex_rng) * sil
        if mlo:
            canvas[_pectoral_wedge(dims, geo) & sil] += 6000.0
        yy, xx = np.mgrid[0:dims[0], 0:dims[1]]
        rad = np.sqrt((xx / rx) ** 2 + ((yy - cy) / ry) ** 2)
        canvas *= np.clip(1.15 - 0.45 * rad ** 3, 0.0, 1.15)

        for malignancy in ("benign", "malignant"):
            pair = fields.get((side, malignancy))
            if pair is None:
                continue
            fld = pair[1] if mlo else pair[0]
            canvas += fld
            masks[(view, malignancy)] = fld > 0

        canvas[~sil] = 0.0
        if side == "l":
            canvas = canvas[:, ::-1]
            for malignancy in ("benign", "malignant"):
                if (view, malignancy) in masks:
                    masks[(view, malignancy)] = masks[(view, malignancy)][:, ::-1]
        images[view] = np.clip(canvas, 0, MAXVAL).astype(np.uint16)
    return images, masks


def _texture(dims, contrast, rng):
    coarse = gaussian_blur(rng.standard_normal(dims), 3.0)
    fine = gaussian_blur(rng.standard_normal(dims), 1.2)
    return 2600.0 * contrast * (coarse * 1.4 + fine * 0.6)


# ---------------------------------------------------------------------------
# population assembly

def assign_birads(exam, rng, noise_rate=0.0):
    """3-class screening assessment: 0 suspicious, 1 normal, 2 benign-only.

    With probability ``noise_rate`` the category is flipped to a uniformly
    chosen other class, mimicking noisy report-derived labels.
    """
    if not 0.0 <= noise_rate < 1.0:
        raise ValueError("noise_rate must be in [0, 1)")
    if exam.left_malignant or exam.right_malignant:
        cat = 0
    elif exam.left_benign or exam.right_benign:
        cat = 2
    else:
        cat = 1
    if noise_rate > 0.0 and rng.uniform() < noise_rate:
        cat = [c for c in (0, 1, 2) if c != cat][int(rng.integers(0, 2))]
    return cat


def _make_lesions(rng, malignant, benign, min_px, max_px, shape_seed):
    lesions = []
    kinds = ("mass", "calcification_cluster", "asymmetry")
    kind_p = (0.55, 0.35, 0.10)
    for i in range(malignant + benign):
        is_mal = i < malignant
        kind = kinds[rng.choice(3, p=kind_p)]
        irr = rng.uniform(0.55, 0.95) if is_mal else rng.uniform(0.05, 0.45)
        lesions.append(LesionSpec(
            kind=kind,
            malignancy="malignant" if is_mal else "benign",
            center=(rng.uniform(0.25, 0.72), rng.uniform(-0.5, 0.5)),
            size_px=rng.uniform(min_px, max_px),
            irregularity=irr,
            shape_seed=int(shape_seed + i)))
    return lesions


def build_population(config: DatasetConfig, seed: int):
    """Plan every exam deterministically.

    Biopsy, malignancy, and occult statuses are quota-based (exact counts,
    assigned over a seeded permutation) so realized fractions track the
    config tightly; splits are assigned per patient.
    """
    config.validate()
    n = config.exams
    if n == 0:
        return []

    rng = substream(seed, "population")
    order = rng.permutation(n)
    n_biopsied = int(round(n * config.biopsied_fraction))
    b_list = order[:n_biopsied]
    biopsied_ids = set(b_list.tolist())
    n_mal = int(round(n_biopsied * config.malignant_fraction))
    malignant_ids = set(b_list[:n_mal].tolist())
    n_occ = int(round(n_biopsied * config.occult_fraction))
    occult_ids = set(b_list[n_biopsied - n_occ:].tolist()) if n_occ else set()

    patients = []
    i = 0
    pidx = 0
    while i < n:
        size = 2 if (i + 1 < n and rng.uniform() < config.multi_exam_fraction) else 1
        patients.append((pidx, list(range(i, i + size))))
        i += size
        pidx += 1

    # per-patient split assignment chasing exam-count targets
    targets = [f * n for f in config.split_fractions]
    counts = [0.0, 0.0, 0.0]
    names = ("train", "val", "test")
    split_of_patient = {}
    for pi in rng.permutation(len(patients)):
        pid, exam_idxs = patients[pi]
        deficits = [targets[s] - counts[s] for s in range(3)]
        s = int(np.argmax(deficits))
        split_of_patient[pid] = names[s]
        counts[s] += len(exam_idxs)

    min_dim = min(min(config.cc_dims), min(config.mlo_dims))
    min_px = config.lesion_frac_range[0] * min_dim
    max_px = config.lesion_frac_range[1] * min_dim

    specs = []
    for pid, exam_idxs in patients:
        prng = substream(seed, "patient", pid)
        age = AGE_BANDS[prng.choice(len(AGE_BANDS), p=_AGE_P)]
        dens = DENSITIES[prng.choice(len(DENSITIES), p=_DENSITY_P)]
        for ei in exam_idxs:
            erng = substream(seed, "examplan", ei)
            left, right = BreastSpec(), BreastSpec()
            if ei in biopsied_ids:
                sides = ["L", "R"] if erng.uniform() < config.bilateral_fraction \
                    else [("L", "R")[int(erng.integers(0, 2))]]
                for side in sides:
                    b = left if side == "L" else right
                    b.biopsied = 1
                    is_mal = ei in malignant_ids
                    both = erng.uniform() < config.both_fraction
                    b.malignant = int(is_mal)
                    b.benign = int((not is_mal) or both)
                    b.occult = int(ei in occult_ids)
                    if not b.occult:
                        b.lesions = _make_lesions(
                            erng, b.malignant, b.benign, min_px, max_px,
                            shape_seed=seed * 1000003 + ei * 101 + (side == "L"))
            specs.append(ExamSpec(
                exam_id=f"e{ei:05d}",
                patient_id=f"p{pid:05d}",
                split=split_of_patient[pid],
                age_band=age, density=dens,
                left=left, right=right, seed=seed,
                density_coupling=config.density_coupling))
    specs.sort(key=lambda s: s.exam_id)
    return specs


def _render_and_write(args):
    spec, config, out_dir = args
    images, masks = render_exam(spec, config.cc_dims, config.mlo_dims)
    paths = {}
    for view in VIEWS:
        p = Path(out_dir) / "images" / f"{spec.exam_id}_{view}.pgm"
        write_pgm16(p, images[view])
        paths[view] = f"images/{p.name}"
    for (view, malignancy), m in sorted(masks.items()):
        mp = Path(out_dir) / "masks" / f"{spec.exam_id}_{view}_{malignancy}.pgm"
        write_pgm8(mp, m.astype(np.uint8) * 255)
    return paths


def generate_dataset(config: DatasetConfig, seed: int, out_dir, jobs=1):
    """Write images, masks, and manifest.csv; byte-identical per (config, seed)."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise GeneratorError(f"cannot create output dir {out_dir}: {exc}") from exc

    specs = build_population(config, seed)
    tasks = [(s, config, out_dir) for s in specs]
    if jobs > 1 and len(tasks) > 1:
        from multiprocessing import Pool
        with Pool(jobs) as pool:
            all_paths = pool.map(_render_and_write, tasks, chunksize=8)
    else:
        all_paths = [_render_and_write(t) for t in tasks]

    records = []
    for spec, paths in zip(specs, all_paths):
        rec = ExamRecord(
            exam_id=spec.exam_id, patient_id=spec.patient_id, split=spec.split,
            age_band=spec.age_band, density=spec.density,
            left_benign=spec.left.benign, left_malignant=spec.left.malignant,
            right_benign=spec.right.benign, right_malignant=spec.right.malignant,
            left_biopsied=spec.left.biopsied, right_biopsied=spec.right.biopsied,
            left_occult=spec.left.occult, right_occult=spec.right.occult,
            birads=0, view_paths=paths)
        rec.birads = assign_birads(
            rec, substream(seed, "birads", spec.exam_id), config.birads_noise)
        records.append(rec)

    write_manifest(out_dir / "manifest.csv", records)
    return records


def write_manifest(path, records):
    with open(path, "w", newline="") as f:
        f.write(MANIFEST_HEADER + "\n")
        for r in records:
            f.write(",".join(str(v) for v in (
                r.exam_id, r.patient_id, r.split, r.age_band, r.density,
                r.left_benign, r.left_malignant, r.right_benign,
                r.right_malignant, r.left_biopsied, r.right_biopsied,
                r.left_occult, r.right_occult, r.birads,
                r.view_paths["rcc"], r.view_paths["lcc"],
                r.view_paths["rmlo"], r.view_paths["lmlo"])) + "\n")


def load_manifest(path):
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_HEADER.split(","):
            raise GeneratorError(f"{path}: unexpected manifest header")
        for row in reader:
            records.append(ExamRecord(
                exam_id=row["exam_id"], patient_id=row["patient_id"],
                split=row["split"], age_band=row["age_band"],
                density=row["density"],
                left_benign=int(row["left_benign"]),
                left_malignant=int(row["left_malignant"]),
                right_benign=int(row["right_benign"]),
                right_malignant=int(row["right_malignant"]),
                left_biopsied=int(row["left_biopsied"]),
                right_biopsied=int(row["right_biopsied"]),
                left_occult=int(row["left_occult"]),
                right_occult=int(row["right_occult"]),
                birads=int(row["birads"]),
                view_paths={v: row[f"{v}_path"] for v in VIEWS}))
    return records


def image_path(data_dir, record, view):
    return Path(data_dir) / record.view_paths[view]


def mask_path(data_dir, record, view, malignancy):
    return Path(data_dir) / "masks" / f"{record.exam_id}_{view}_{malignancy}.pgm"


def load_mask(data_dir, record, view, malignancy, dims=None):
    """Boolean mask; a missing file means empty support."""
    p = mask_path(data_dir, record, view, malignancy)
    if not p.exists():
        if dims is None:
            dims = read_pgm(image_path(data_dir, record, view)).shape
        return np.zeros(dims, dtype=bool)
    return read_pgm(p) > 0

"""Synthetic longitudinal cohorts with known latent dynamics.

Each patient carries a hidden (severity, velocity, reserve) state evolved by
a discrete-time linear-Gaussian system; the event stream is a noisy, partial
view of it. Two regimes share the same equations and differ in time
constants: "chronic" drifts slowly with per-patient mean reversion, "acute"
spikes fast and decays. Outcome hazards are wired so that *velocity* (not
severity alone) determines near-term progression, which is the property the
trajectory-modeling experiments need from the testbed.

Label windows: progression 180 d, toxicity 90 d, mortality 365 d, all opening
one day after the anchor time to keep intraday information out.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError
from .records import ClinicalEvent, PatientRecord

TRIGGER_CODES = {
    "rx_start": "start_of_therapy",
    "prog_confirmed": "confirmed_progression",
    "surgery_curative": "curative_surgery",
    "dx_metastatic": "metastatic_diagnosis",
    "perf_decline": "performance_decline",
}

PROGRESSION_WINDOW = 180.0
TOXICITY_WINDOW = 90.0
MORTALITY_WINDOW = 365.0
LABEL_BUFFER = 1.0  # days between anchor and the start of every window

LABEL_NAMES = (
    "progression_within_180d",
    "toxicity_within_90d",
    "mortality_within_365d",
    "survival_time",
    "event_indicator",
)

N_COMORBIDITY_CODES = 30
STAGE_LEVELS = (2.5, 5.0, 7.5)  # third crossing is coded as metastatic


@dataclass(frozen=True)
class LatentState:
    severity: float
    velocity: float
    reserve: float


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 1000
    regime: str = "chronic"
    horizon_days: int = 540
    event_rate: float = 0.35
    noise_sd: float = 0.25
    seed: int = 0
    # latent dynamics
    sev0_range: tuple = (1.0, 6.0)
    drift_mean: float = 0.004
    drift_sd: float = 0.032
    vel_revert: float = 0.004
    vel_noise: float = 0.0016
    sev_noise: float = 0.03
    vel0_mean: float | None = None  # None: per-patient drift
    vel0_sd: float = 0.01
    # treatment
    treat_threshold: float = 6.5
    treat_start_prob: float = 0.2
    treat_course_days: int = 90
    treat_dose_gap: int = 14
    treat_cooldown: int = 30
    treat_effect: float = 0.01
    treat_dose_effect: float = 0.003
    # outcome hazards (daily p = base * exp(coefs), capped)
    hazard_cap: float = 0.5
    prog_base: float = 0.00026
    prog_vel_coef: float = 4.8
    prog_sev_coef: float = 0.25
    prog_cooldown: int = 30
    perf_base: float = 0.002
    perf_vel_coef: float = 0.6
    perf_cooldown: int = 150
    surg_threshold: float = 7.5
    surg_prob: float = 0.003
    surg_cooldown: int = 180
    tox_base: float = 0.005
    tox_cooldown: int = 45
    mort_base: float = 1.0e-5
    mort_sev_coef: float = 0.7
    # velocity readout
    trend_scale: float = 30.0
    trend_noise: float = 2.2

    def __post_init__(self):
        if self.n_patients < 1:
            raise DataError("n_patients must be >= 1")
        if self.event_rate <= 0:
            raise DataError("event_rate must be > 0")
        if self.horizon_days < 30:
            raise DataError("horizon_days must be >= 30")
        if self.regime not in ("chronic", "acute"):
            raise DataError(f"unknown regime {self.regime!r}")


def config_for_regime(regime, **overrides):
    """Default GeneratorConfig for a regime; acute only rescales the time
    constants (faster reversion, spiking onset, denser observation)."""
    if regime == "chronic":
        cfg = GeneratorConfig(regime="chronic")
    elif regime == "acute":
        cfg = GeneratorConfig(
            regime="acute",
            horizon_days=120,
            event_rate=0.9,
            sev0_range=(2.0, 4.0),
            drift_mean=-0.035,
            drift_sd=0.02,
            vel_revert=0.045,
            vel_noise=0.005,
            sev_noise=0.05,
            vel0_mean=0.5,
            vel0_sd=0.12,
            treat_threshold=5.0,
            treat_start_prob=0.5,
            treat_course_days=30,
            treat_dose_gap=7,
            treat_cooldown=15,
            prog_base=0.001,
            prog_cooldown=15,
            perf_base=0.004,
            perf_cooldown=60,
            surg_prob=0.001,
            surg_cooldown=90,
            tox_base=0.006,
            tox_cooldown=20,
            mort_base=6e-5,
            mort_sev_coef=0.55,
        )
    else:
        raise DataError(f"unknown regime {regime!r}")
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class OutcomeLabels:
    progression_within_180d: bool
    toxicity_within_90d: bool
    mortality_within_365d: bool
    survival_time: float
    event_indicator: bool

    def __post_init__(self):
        if self.survival_time < 0:
            raise DataError(f"negative survival time {self.survival_time}")
        expected = self.event_indicator and (
            LABEL_BUFFER < self.survival_time <= MORTALITY_WINDOW
        )
        if self.mortality_within_365d != expected:
            raise DataError("mortality label inconsistent with survival time")

    def as_dict(self):
        return {
            "progression_within_180d": float(self.progression_within_180d),
            "toxicity_within_90d": float(self.toxicity_within_90d),
            "mortality_within_365d": float(self.mortality_within_365d),
            "survival_time": float(self.survival_time),
            "event_indicator": float(self.event_indicator),
        }


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x > -60 else 0.0


def _simulate_patient(pid, idx, cfg):
    """Daily latent update plus event emission for one patient.

    Returns (PatientRecord, latents (days+1, 3) array of severity/velocity/
    reserve sampled at integer days 0..last observed day).
    """
    rng = np.random.default_rng([cfg.seed, idx])
    days = cfg.horizon_days
    # pre-drawn randomness: one block per day keeps the loop scalar-only
    normals = rng.standard_normal((days + 1, 4))
    uniforms = rng.random((days + 1, 11))
    comorb_idx = rng.integers(0, N_COMORBIDITY_CODES, size=days + 1)
    # within-day fractional offsets, one column per emission slot; death is
    # pinned to the end of its day so nothing follows it
    jitters = rng.random((days + 1, 11)) * 0.99

    reserve = float(np.clip(rng.normal(0.55, 0.18), 0.05, 0.95))
    drift = rng.normal(cfg.drift_mean, cfg.drift_sd)
    sev = rng.uniform(*cfg.sev0_range)
    vel0_center = cfg.vel0_mean if cfg.vel0_mean is not None else drift
    vel = rng.normal(vel0_center, cfg.vel0_sd)

    events = []

    def emit(day, category, code, value=None):
        events.append(ClinicalEvent(pid, float(day), category, code, value))

    age = int(rng.integers(4, 9)) * 10
    emit(0, "demographics", f"age{age}")
    emit(0, "demographics", "sex_f" if rng.random() < 0.5 else "sex_m")
    emit(0, "conditions", "dx_primary")

    stage = sum(sev > lvl for lvl in STAGE_LEVELS)
    course_until = -1
    next_dose = -1
    treat_ok_after = 0
    prog_ok_after = 0
    perf_ok_after = 0
    surg_ok_after = 0
    tox_ok_after = 0

    latents = np.empty((days + 1, 3))
    latents[0] = (sev, vel, reserve)
    died = False

    for day in range(1, days + 1):
        xi_v, xi_s, n_meas, n_trend = normals[day]
        (
            u_meas,
            u_trend,
            u_comorb,
            u_note,
            u_check,
            u_prog,
            u_perf,
            u_surg,
            u_death,
            u_treat,
            u_tox,
        ) = uniforms[day]

        vel = vel + cfg.vel_revert * (drift - vel) + cfg.vel_noise * xi_v
        sev = min(10.0, max(0.0, sev + vel + cfg.sev_noise * xi_s))

        jit = jitters[day]

        # treatment: start a course above threshold, dose periodically,
        # every drug event subtracts from velocity
        on_course = day <= course_until
        if not on_course and day >= treat_ok_after and sev > cfg.treat_threshold:
            if u_treat < cfg.treat_start_prob:
                emit(day + jit[0], "drugs", "rx_start")
                vel -= cfg.treat_effect
                course_until = day + cfg.treat_course_days
                next_dose = day + cfg.treat_dose_gap
                treat_ok_after = course_until + cfg.treat_cooldown
                on_course = True
        elif on_course and day == next_dose:
            emit(day + jit[0], "drugs", "rx_dose")
            vel -= cfg.treat_dose_effect
            next_dose = day + cfg.treat_dose_gap

        # stage crossings ratchet upward; the top level codes as metastatic
        new_stage = sum(sev > lvl for lvl in STAGE_LEVELS)
        while new_stage > stage:
            stage += 1
            if stage == len(STAGE_LEVELS):
                emit(day + jit[1], "conditions", "dx_metastatic")
            else:
                emit(day + jit[1], "conditions", f"cond_stage{stage}")

        # progression: daily hazard log-linear in velocity (dominant) and
        # severity, so near-term worsening depends on where the state is
        # heading rather than where it sits
        if day >= prog_ok_after:
            p = min(
                cfg.hazard_cap,
                cfg.prog_base
                * math.exp(
                    cfg.prog_vel_coef * vel * cfg.trend_scale
                    + cfg.prog_sev_coef * (sev - 5.0)
                ),
            )
            if u_prog < p:
                emit(day + jit[2], "conditions", "prog_confirmed")
                prog_ok_after = day + cfg.prog_cooldown

        if day >= perf_ok_after:
            p = min(
                cfg.hazard_cap,
                cfg.perf_base
                * math.exp(cfg.perf_vel_coef * vel * cfg.trend_scale),
            )
            if u_perf < p:
                emit(day + jit[3], "observations", "perf_decline")
                perf_ok_after = day + cfg.perf_cooldown

        if day >= surg_ok_after and sev > cfg.surg_threshold:
            if u_surg < cfg.surg_prob:
                emit(day + jit[4], "procedures", "surgery_curative")
                sev = max(0.0, sev - 2.5)
                vel = min(vel, 0.0) - 0.015
                surg_ok_after = day + cfg.surg_cooldown

        if day <= course_until and day >= tox_ok_after:
            if u_tox < cfg.tox_base * (1.3 - reserve):
                emit(day + jit[5], "observations", "tox_grade3")
                tox_ok_after = day + cfg.tox_cooldown

        # observations of the latent state
        p_meas = min(0.95, cfg.event_rate * (0.5 + 0.06 * sev))
        if u_meas < p_meas:
            emit(day + jit[6], "measurements", "sev", sev + cfg.noise_sd * n_meas)
        if u_trend < cfg.event_rate * 0.3:
            emit(
                day + jit[7],
                "measurements",
                "trend",
                vel * cfg.trend_scale + cfg.trend_noise * n_trend,
            )
        if u_comorb < cfg.event_rate * 0.18:
            emit(day + jit[8], "conditions", f"comorb_{comorb_idx[day]:02d}")
        if u_note < cfg.event_rate * 0.05:
            emit(day + jit[9], "notes", "note_visit")
        if u_check < cfg.event_rate * 0.08:
            emit(day + jit[10], "procedures", "proc_checkup")

        latents[day] = (sev, vel, reserve)

        if u_death < cfg.mort_base * math.exp(cfg.mort_sev_coef * sev):
            emit(day + 0.999, "death", "death")
            latents = latents[: day + 1]
            died = True
            break

    if not died:
        latents = latents[: days + 1]
    return PatientRecord(pid, tuple(events)), latents


def generate_cohort(config):
    """All patients of a cohort. Returns (records, latents) where latents
    maps patient_id to a (days_observed+1, 3) array of daily
    (severity, velocity, reserve)."""
    records, latents = [], {}
    for idx in range(config.n_patients):
        pid = f"{config.regime[0]}{config.seed % 1000:03d}_{idx:05d}"
        rec, lat = _simulate_patient(pid, idx, config)
        records.append(rec)
        latents[pid] = lat
    return records, latents


def latent_at(latents, t0):
    """Ground-truth state at integer day floor(t0)."""
    day = min(int(t0), len(latents) - 1)
    sev, vel, res = latents[day]
    return LatentState(sev, vel, res)


def label_outcomes(record, t0, horizon_days):
    """Outcome labels for an anchor t0; windows open at t0 + 1 day and the
    survival time is censored at the cohort horizon."""
    horizon_end = horizon_days + 1.0  # event times live in [0, horizon_days + 1)
    if t0 >= horizon_end:
        raise DataError(f"t0={t0} beyond horizon {horizon_days}")

    def _in_window(ev, code, width):
        return ev.code == code and t0 + LABEL_BUFFER < ev.time <= t0 + width

    prog = any(_in_window(e, "prog_confirmed", PROGRESSION_WINDOW) for e in record.events)
    tox = any(_in_window(e, "tox_grade3", TOXICITY_WINDOW) for e in record.events)
    if record.death_time is not None:
        survival = record.death_time - t0
        event = True
        mort = t0 + LABEL_BUFFER < record.death_time <= t0 + MORTALITY_WINDOW
    else:
        survival = horizon_end - t0
        event = False
        mort = False
    return OutcomeLabels(prog, tox, mort, max(survival, 0.0), event)


def emit_trigger_events(record):
    """Decision nodes: (t0, kind) for every trigger-coded event."""
    return [
        (e.time, TRIGGER_CODES[e.code])
        for e in record.events
        if e.code in TRIGGER_CODES
    ]


# ---------------------------------------------------------------------------
# label sidecar: patient_id<TAB>t0<TAB>trigger<TAB>label_name<TAB>value
# ---------------------------------------------------------------------------


def build_label_rows(records, horizon_days):
    rows = []
    for rec in records:
        for t0, kind in emit_trigger_events(rec):
            labels = label_outcomes(rec, t0, horizon_days)
            for name, value in labels.as_dict().items():
                rows.append((rec.patient_id, t0, kind, name, value))
    return rows


def write_labels(path, rows):
    # anchor times keep full precision: they are join keys against trigger
    # times recovered from the event file
    with open(path, "w", encoding="utf-8") as fh:
        for pid, t0, kind, name, value in rows:
            fh.write(f"{pid}\t{t0!r}\t{kind}\t{name}\t{value:.6g}\n")


def read_labels(path):
    """-> {(patient_id, t0): {"trigger": kind, <label_name>: value, ...}}"""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 fields")
            pid, t0_s, kind, name, value_s = parts
            entry = table.setdefault((pid, float(t0_s)), {"trigger": kind})
            entry[name] = float(value_s)
    return table

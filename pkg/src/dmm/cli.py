"""Experiment runner: config parsing, training loops, sampling, verification.

One INI config file fully determines a run. Subcommands: train (checkpoints
plus a metrics CSV), sample (sample CSV from a checkpoint), verify (the
structural-identity suite as a JSON report), oracle (brute-force reference
values). Checkpoints are written atomically; metrics are append-only and
contain no wall-clock columns so reruns with the same seed are bitwise
identical.
"""

import argparse
import configparser
import csv
import io
import json
import os
import sys
import time

import numpy as np
from scipy.special import ndtri

from . import discrete as dsc
from . import euclidean as euc
from . import nn
from . import simplex as spx
from . import so3
from . import verify
from .core import RateSchedule, RngStream

OUTPUT_ROOT_ENV = "DMM_OUTPUT_ROOT"
METRICS_FLUSH_EVERY = 100
SAMPLE_ROW_CAP = 10**6


class ConfigError(Exception):
    """Config problem, anchored to a file line where possible."""

    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        loc = f"{path}:{line}" if line else str(path)
        super().__init__(f"{loc}: {message}")


# --- configuration ----------------------------------------------------------


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s):
    return tuple(float(v) for v in s.split(","))


def _float_rows(s):
    return tuple(tuple(float(v) for v in row.split(",")) for row in s.split(";"))


SCHEMA = {
    "experiment": {"space": str, "task": str, "seed": int, "out": str},
    "schedule": {"beta_min": float, "beta_max": float, "horizon": float},
    "net": {"hidden": _ints, "time_embed_dim": int, "cond_embed_dim": int,
            "cond_hidden": _ints, "activation": str},
    "optimizer": {"learning_rate": float, "batch_size": int, "iterations": int,
                  "checkpoint_every": int},
    "sampler": {"n_steps": int, "n_samples": int},
}

TASK_SCHEMA = {
    ("euclidean", "gauss"): {"dim": int},
    ("euclidean", "gandk"): {"n_observations": int, "n_summaries": int,
                             "prior_lo": float, "prior_hi": float},
    ("so3", "wn_mixture"): {"n_modes": int, "mode_sigma": float},
    ("simplex", "dirichlet_mixture"): {"theta": _floats, "alphas": _float_rows},
    ("discrete", "inpainting"): {"n_pixels": int, "n_values": int,
                                 "coupling": float, "observed": _ints,
                                 "rate_sigma": float},
}

DEFAULTS = {
    "experiment": {"seed": 0, "out": ""},
    "schedule": {"beta_min": 0.1, "beta_max": 8.0, "horizon": 1.0},
    "net": {"hidden": (64, 64), "time_embed_dim": 32, "cond_embed_dim": 0,
            "cond_hidden": (), "activation": "silu"},
    # desk-scale defaults; real runs override iterations upward
    "optimizer": {"learning_rate": 1e-3, "batch_size": 256, "iterations": 2000,
                  "checkpoint_every": 0},
    "sampler": {"n_steps": 200, "n_samples": 1000},
}

TASK_DEFAULTS = {
    ("euclidean", "gauss"): {"dim": 1},
    ("euclidean", "gandk"): {"n_observations": 250, "n_summaries": 100,
                             "prior_lo": 0.0, "prior_hi": 10.0},
    ("so3", "wn_mixture"): {"n_modes": 4, "mode_sigma": 0.3},
    ("simplex", "dirichlet_mixture"): {"theta": (3.0, 3.0, 3.0),
                                       "alphas": ((9.0, 3.0, 3.0),
                                                  (3.0, 3.0, 9.0))},
    ("discrete", "inpainting"): {"n_pixels": 4, "n_values": 4, "coupling": 1.0,
                                 "observed": (0, 2), "rate_sigma": 1.5},
}


class ExperimentConfig:
    """Validated, typed view of one run manifest."""

    def __init__(self, space, task, seed, out, schedule, net, optimizer,
                 sampler, task_params, raw):
        self.space = space
        self.task = task
        self.seed = seed
        self.out = out
        self.schedule = schedule
        self.net = net
        self.optimizer = optimizer
        self.sampler = sampler
        self.task_params = task_params
        self.raw = raw  # plain dict for checkpoint embedding


def _find_line(lines, name, section=False):
    needle = f"[{name}]" if section else name
    for i, line in enumerate(lines, start=1):
        s = line.strip()
        if section and s == needle:
            return i
        if not section and (s.startswith(name + "=") or s.startswith(name + " ")
                            or s.startswith(name + ":") or s.split("=")[0].strip() == name):
            return i
    return 0


def parse_config(path):
    if not os.path.exists(path):
        raise ConfigError(path, 0, "config file not found")
    with open(path) as fh:
        text = fh.read()
    lines = text.splitlines()
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=path)
    except configparser.Error as e:
        line = getattr(e, "lineno", 0) or 0
        raise ConfigError(path, line, str(e).splitlines()[0]) from e

    if not cp.has_option("experiment", "space") or not cp.has_option("experiment", "task"):
        raise ConfigError(path, _find_line(lines, "experiment", section=True),
                          "section [experiment] must set 'space' and 'task'")
    space = cp.get("experiment", "space")
    task = cp.get("experiment", "task")
    if (space, task) not in TASK_SCHEMA:
        known = ", ".join(f"{s}/{t}" for s, t in sorted(TASK_SCHEMA))
        raise ConfigError(path, _find_line(lines, "space"),
                          f"unknown space/task '{space}/{task}' (known: {known})")

    for section in cp.sections():
        if section != "task" and section not in SCHEMA:
            raise ConfigError(path, _find_line(lines, section, section=True),
                              f"unknown section [{section}]")
        allowed = TASK_SCHEMA[(space, task)] if section == "task" else SCHEMA[section]
        for key in cp.options(section):
            if key not in allowed:
                raise ConfigError(path, _find_line(lines, key),
                                  f"unknown key '{key}' in section [{section}]")

    def typed(section, schema, defaults):
        out = dict(defaults)
        if cp.has_section(section):
            for key in cp.options(section):
                raw = cp.get(section, key)
                try:
                    out[key] = schema[key](raw)
                except ValueError as e:
                    raise ConfigError(path, _find_line(lines, key),
                                      f"bad value for '{key}': {raw!r} ({e})") from e
        return out

    exp = typed("experiment", SCHEMA["experiment"],
                {**DEFAULTS["experiment"], "space": space, "task": task})
    sched_kw = typed("schedule", SCHEMA["schedule"], DEFAULTS["schedule"])
    net_kw = typed("net", SCHEMA["net"], DEFAULTS["net"])
    opt = typed("optimizer", SCHEMA["optimizer"], DEFAULTS["optimizer"])
    samp = typed("sampler", SCHEMA["sampler"], DEFAULTS["sampler"])
    task_params = typed("task", TASK_SCHEMA[(space, task)],
                        TASK_DEFAULTS[(space, task)])

    try:
        schedule = RateSchedule(sched_kw["beta_min"], sched_kw["beta_max"],
                                sched_kw["horizon"])
    except ValueError as e:
        raise ConfigError(path, _find_line(lines, "schedule", section=True),
                          str(e)) from e
    if opt["iterations"] < 0 or opt["batch_size"] < 1 or opt["learning_rate"] <= 0:
        raise ConfigError(path, _find_line(lines, "optimizer", section=True),
                          "need iterations >= 0, batch_size >= 1, learning_rate > 0")
    if samp["n_steps"] < 1 or samp["n_samples"] < 1:
        raise ConfigError(path, _find_line(lines, "sampler", section=True),
                          "need n_steps >= 1 and n_samples >= 1")

    raw = {s: dict(cp.items(s)) for s in cp.sections()}
    return ExperimentConfig(space, task, exp["seed"], exp["out"], schedule,
                            net_kw, opt, samp, task_params, raw)


def resolve_out(cfg, cli_out):
    out = cli_out or cfg.out or os.path.join("runs", f"{cfg.space}_{cfg.task}")
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    return out


def atomic_write(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# --- tasks ------------------------------------------------------------------


def one_hot(x, S):
    return np.eye(S)[np.asarray(x)]


class GaussTask:
    """Unconditional standard-normal data in R^d; noise-prediction training."""

    columns = None  # set per dim

    def __init__(self, cfg):
        self.sched = cfg.schedule
        self.dim = cfg.task_params["dim"]
        self.raw = nn.ScoreNet(self.dim, self.dim, hidden=cfg.net["hidden"],
                               time_embed_dim=cfg.net["time_embed_dim"],
                               activation=cfg.net["activation"])
        self.net = euc.NoiseScoreNet(self.raw, self.sched)
        self.columns = [f"x{i}" for i in range(self.dim)]
        self.t_eps = euc.default_t_eps(self.sched)

    def make_batch(self, gen, b):
        x0 = gen.standard_normal((b, self.dim))
        t = gen.uniform(self.t_eps, self.sched.horizon_T, size=b)
        m = np.exp(-0.5 * self.sched.integrated_beta(t))[:, None]
        xt = m * x0 + np.sqrt(1.0 - m * m) * gen.standard_normal(x0.shape)
        return {"x0": x0, "xt": xt, "t": t}

    def loss(self, tensors, batch):
        return euc.eps_dsm_loss(self.raw, tensors, batch, self.sched)

    def sample(self, params, cfg, gen, observation):
        score = euc.net_score_fn(self.net, params)
        return euc.reverse_sample(score, self.sched, cfg.sampler["n_steps"],
                                  gen, cfg.sampler["n_samples"], dim=self.dim)


class GandKTask:
    """Amortized posterior for g-and-k parameters from order statistics.

    Conditioning is asinh of evenly spaced order statistics of the
    observations; parameters train on the [-1, 1] box scale.
    """

    columns = ["A", "B", "g", "k"]

    def __init__(self, cfg):
        self.sched = cfg.schedule
        p = cfg.task_params
        self.n_obs = p["n_observations"]
        self.n_summ = p["n_summaries"]
        self.lo, self.hi = p["prior_lo"], p["prior_hi"]
        if self.n_summ > self.n_obs:
            raise ValueError("n_summaries cannot exceed n_observations")
        cond_embed = cfg.net["cond_embed_dim"] or 64
        self.raw = nn.ScoreNet(4, 4, hidden=cfg.net["hidden"],
                               time_embed_dim=cfg.net["time_embed_dim"],
                               cond_dim=self.n_summ, cond_embed_dim=cond_embed,
                               cond_hidden=cfg.net["cond_hidden"],
                               activation=cfg.net["activation"])
        self.net = euc.NoiseScoreNet(self.raw, self.sched)
        self.t_eps = euc.default_t_eps(self.sched)
        self.ranks = np.floor((np.arange(self.n_summ) + 0.5)
                              * self.n_obs / self.n_summ).astype(int)

    def simulate_pairs(self, gen, b):
        theta = euc.gandk_prior_sample(gen, b, self.lo, self.hi)
        u = gen.uniform(1e-12, 1.0 - 1e-12, size=(b, self.n_obs))
        z = ndtri(u)
        A, B, g, k = (theta[:, i, None] for i in range(4))
        xi = A + B * (1.0 + 0.8 * np.tanh(g * z / 2.0)) * (1.0 + z * z) ** k * z
        s = np.sort(xi, axis=1)[:, self.ranks]
        return theta, np.arcsinh(s)

    def make_batch(self, gen, b):
        theta, cond = self.simulate_pairs(gen, b)
        x0 = euc.rescale_to_unit(theta, self.lo, self.hi)
        t = gen.uniform(self.t_eps, self.sched.horizon_T, size=b)
        m = np.exp(-0.5 * self.sched.integrated_beta(t))[:, None]
        xt = m * x0 + np.sqrt(1.0 - m * m) * gen.standard_normal(x0.shape)
        return {"x0": x0, "xt": xt, "t": t, "cond": cond}

    def loss(self, tensors, batch):
        return euc.eps_dsm_loss(self.raw, tensors, batch, self.sched)

    def encode_observation(self, xi):
        s = euc.summarize_observations(np.asarray(xi, dtype=np.float64),
                                       self.n_summ)
        return np.arcsinh(s)

    def posterior_sample(self, params, cond, n_steps, n_samples, gen):
        score = euc.net_score_fn(self.net, params, cond=cond)
        u = euc.reverse_sample(score, self.sched, n_steps, gen, n_samples, dim=4)
        return euc.rescale_from_unit(np.clip(u, -1.0, 1.0), self.lo, self.hi)

    def sample(self, params, cfg, gen, observation):
        if observation is None:
            raise ValueError("gandk sampling needs --observation (one value per line)")
        cond = self.encode_observation(observation)
        return self.posterior_sample(params, cond, cfg.sampler["n_steps"],
                                     cfg.sampler["n_samples"], gen)


def default_mode_centers(n_modes):
    """Well separated rotations: fixed axes, 2pi/3 angle each."""
    axes = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0],
                     [1.0, 1.0, 1.0], [1.0, -1.0, 0.0], [0.0, 1.0, -1.0]])
    if n_modes > len(axes):
        raise ValueError(f"at most {len(axes)} modes supported")
    axes = axes[:n_modes] / np.linalg.norm(axes[:n_modes], axis=1, keepdims=True)
    return np.stack([so3.rotation_from_axis_angle(a, 2.0 * np.pi / 3.0)
                     for a in axes])


class WNMixtureTask:
    """Wrapped-normal mixture on the rotation group; tangent score training."""

    columns = ["qw", "qx", "qy", "qz"]
    N_TIME_SLICES = 32

    def __init__(self, cfg):
        self.sched = cfg.schedule
        p = cfg.task_params
        self.means = default_mode_centers(p["n_modes"])
        self.sigmas = np.full(p["n_modes"], p["mode_sigma"])
        self.raw = nn.ScoreNet(9, 3, hidden=cfg.net["hidden"],
                               time_embed_dim=cfg.net["time_embed_dim"],
                               activation=cfg.net["activation"])
        self.net = so3.TangentScoreNet(self.raw, self.sched)
        T = self.sched.horizon_T
        # shared time slices so heat kernels are built once each
        self.t_grid = np.linspace(1e-3 * T, T, self.N_TIME_SLICES)

    def make_batch(self, gen, b):
        x0, _ = so3.wrapped_normal_mixture_sample(self.means, self.sigmas, gen, n=b)
        t = float(self.t_grid[gen.integers(self.N_TIME_SLICES)])
        kernel = so3.kernel_for(self.sched.integrated_beta(t))
        xt = so3.sample_igso3(kernel, x0, gen)
        return {"x0": x0, "xt": xt, "t": np.full(b, t)}

    def loss(self, tensors, batch):
        # weight by tau(t): the kernel score scales like 1/sqrt(tau), so the
        # unweighted objective is dominated by rare small-time batches
        tau = float(self.sched.integrated_beta(batch["t"][0]))
        return so3.so3_dsm_loss(self.net, tensors, batch, self.sched) * tau

    def sample(self, params, cfg, gen, observation):
        score = so3.net_score_fn(self.net, params)
        return so3.geodesic_random_walk_reverse(score, self.sched,
                                                cfg.sampler["n_steps"], gen,
                                                cfg.sampler["n_samples"])


class DirichletMixtureTask:
    """Dirichlet-mixture data under Wright-Fisher noise on the simplex."""

    def __init__(self, cfg):
        self.sched = cfg.schedule
        p = cfg.task_params
        self.wf = spx.WFParams(np.asarray(p["theta"], dtype=np.float64))
        self.alphas = np.asarray(p["alphas"], dtype=np.float64)
        if self.alphas.shape[1] != self.wf.N:
            raise ValueError("mixture alphas and theta dimension mismatch")
        N = self.wf.N
        self.raw = nn.ScoreNet(N, N, hidden=cfg.net["hidden"],
                               time_embed_dim=cfg.net["time_embed_dim"],
                               activation=cfg.net["activation"])
        self.net = spx.StationaryScoreNet(self.raw, self.wf)
        self.columns = [f"p{i}" for i in range(N)]
        self.t_lo = 1e-3 * self.sched.horizon_T

    def make_batch(self, gen, b):
        p0, _ = spx.dirichlet_mixture_sample(self.alphas, gen, n=b)
        # one shared time per batch: the exact forward sampler builds its
        # coefficient mixture per time point
        t = float(gen.uniform(self.t_lo, self.sched.horizon_T))
        pt = spx.wf_exact_sample(p0, self.wf, self.sched, t, gen)
        return {"pt": pt, "t": np.full(b, t)}

    def loss(self, tensors, batch):
        return spx.wf_ism_loss(self.net, tensors, batch, self.sched)

    def sample(self, params, cfg, gen, observation):
        score = spx.net_score_fn(self.net, params)
        return spx.wf_reverse_sample(score, self.wf, self.sched,
                                     cfg.sampler["n_steps"], gen,
                                     cfg.sampler["n_samples"])


class InpaintingTask:
    """Conditional denoising on a small pixel grid.

    Data: D pixels with S values, joint density proportional to
    exp(-coupling * sum |x_d - x_{d+1}|); conditioning is the one-hot
    encoding of the observed pixels' clean values. The denoiser trains by
    cross-entropy on clean values, whose minimizer is the exact posterior.
    """

    N_TIME_SLICES = 32

    def __init__(self, cfg):
        self.sched = cfg.schedule
        p = cfg.task_params
        self.D, self.S = p["n_pixels"], p["n_values"]
        self.observed = tuple(p["observed"])
        if any(d < 0 or d >= self.D for d in self.observed):
            raise ValueError("observed pixel index out of range")
        self.forward = dsc.FactorizedCTMC(
            dsc.gaussian_rate_matrix(self.S, p["rate_sigma"]), self.D)
        self.states = dsc.all_states(self.S, self.D)
        logw = -p["coupling"] * np.abs(np.diff(self.states, axis=1)).sum(axis=1)
        w = np.exp(logw - logw.max())
        self.p_data = w / w.sum()
        cond_dim = len(self.observed) * self.S
        cond_embed = cfg.net["cond_embed_dim"] or 32
        self.raw = nn.ScoreNet(self.D * self.S, self.D * self.S,
                               hidden=cfg.net["hidden"],
                               time_embed_dim=cfg.net["time_embed_dim"],
                               cond_dim=cond_dim, cond_embed_dim=cond_embed,
                               cond_hidden=cfg.net["cond_hidden"],
                               activation=cfg.net["activation"])
        self.net = self.raw
        self.columns = [f"pixel{i}" for i in range(self.D)]
        T = self.sched.horizon_T
        self.t_grid = np.linspace(1e-3 * T, T, self.N_TIME_SLICES)

    def encode_cond(self, x_obs):
        return one_hot(np.asarray(x_obs, dtype=int),
                       self.S).reshape(len(np.atleast_2d(x_obs)), -1)

    def make_batch(self, gen, b):
        idx = gen.choice(len(self.states), size=b, p=self.p_data)
        x0 = self.states[idx]
        cond = one_hot(x0[:, self.observed], self.S).reshape(b, -1)
        t = float(self.t_grid[gen.integers(self.N_TIME_SLICES)])
        xt = self.forward.sample_forward(x0, self.sched, t, gen)
        return {"x0": x0, "xt": xt, "t": np.full(b, t), "cond": cond}

    def loss(self, tensors, batch):
        from . import autodiff as ad

        x0, xt = batch["x0"], batch["xt"]
        b = x0.shape[0]
        feats = one_hot(xt, self.S).reshape(b, -1)
        logits = self.raw.apply(tensors, ad.Tensor(feats), batch["t"],
                                batch["cond"]).reshape(b, self.D, self.S)
        logp = logits - ad.logsumexp(logits, axis=-1, keepdims=True)
        mask = one_hot(x0, self.S)
        return -(logp * ad.Tensor(mask)).sum() * (1.0 / b)

    def denoiser(self, params):
        def fn(x, cond, t):
            x = np.asarray(x)
            feats = one_hot(x, self.S).reshape(x.shape[0], -1)
            logits = self.raw.apply(params, feats, np.full(x.shape[0], t),
                                    cond).reshape(x.shape[0], self.D, self.S)
            e = np.exp(logits - logits.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)

        return fn

    def posterior_table(self, x_obs):
        """Brute-force p_data(x | observed pixels) over the product space."""
        mask = np.all(self.states[:, self.observed] == np.asarray(x_obs), axis=1)
        post = np.where(mask, self.p_data, 0.0)
        return post / post.sum()

    def sample(self, params, cfg, gen, observation):
        if observation is None:
            raise ValueError("inpainting sampling needs --observation "
                             "(one observed pixel value per line)")
        x_obs = np.asarray(observation, dtype=int).ravel()
        if x_obs.size != len(self.observed):
            raise ValueError(f"expected {len(self.observed)} observed values")
        n = cfg.sampler["n_samples"]
        cond = np.broadcast_to(self.encode_cond(x_obs[None, :]),
                               (n, len(self.observed) * self.S))
        model = dsc.ReverseRateModel(self.forward, self.sched,
                                     self.denoiser(params))
        x = dsc.tau_leaping_sample(model, cond=cond,
                                   n_steps=cfg.sampler["n_steps"], rng=gen,
                                   n_samples=n)
        return np.atleast_2d(x)


TASKS = {
    ("euclidean", "gauss"): GaussTask,
    ("euclidean", "gandk"): GandKTask,
    ("so3", "wn_mixture"): WNMixtureTask,
    ("simplex", "dirichlet_mixture"): DirichletMixtureTask,
    ("discrete", "inpainting"): InpaintingTask,
}


def build_task(cfg):
    return TASKS[(cfg.space, cfg.task)](cfg)


# --- commands ---------------------------------------------------------------


def train_command(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    task = build_task(cfg)
    stream = RngStream(cfg.seed)
    params = task.raw.init_params(stream.child(1))
    opt = cfg.optimizer
    adam = nn.AdamState(params, learning_rate=opt["learning_rate"])
    gen = stream.child(2).generator
    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    extra = {"config": cfg.raw, "space": cfg.space, "task": cfg.task}

    t_start = time.monotonic()
    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "learning_rate"])
        for it in range(opt["iterations"]):
            batch = task.make_batch(gen, opt["batch_size"])
            loss, grads = nn.loss_gradient(task.raw, params, task.loss, batch)
            lr = nn.cosine_lr(opt["learning_rate"], it, opt["iterations"])
            nn.adam_step(adam, params, grads, learning_rate=lr)
            writer.writerow([it, repr(float(loss)), repr(float(lr))])
            if (it + 1) % METRICS_FLUSH_EVERY == 0:
                fh.flush()
            if opt["checkpoint_every"] and (it + 1) % opt["checkpoint_every"] == 0:
                nn.save_checkpoint(ckpt_path, task.raw, params, adam=adam,
                                   rng=stream, extra={**extra, "iteration": it + 1})
    nn.save_checkpoint(ckpt_path, task.raw, params, adam=adam, rng=stream,
                       extra={**extra, "iteration": opt["iterations"]})
    summary = {"iterations": opt["iterations"],
               "wall_time_seconds": time.monotonic() - t_start,
               "checkpoint": ckpt_path, "metrics": metrics_path}
    atomic_write(os.path.join(out_dir, "train_summary.json"),
                 json.dumps(summary, indent=2) + "\n")
    return 0


def load_observation(path):
    if path is None:
        return None
    return np.loadtxt(path, ndmin=1)


def sample_command(cfg, out_dir, observation_path):
    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    if not os.path.exists(ckpt_path):
        print(f"error: no checkpoint at {ckpt_path}; run train first",
              file=sys.stderr)
        return 1
    task = build_task(cfg)
    _, params, _, doc = nn.load_checkpoint(ckpt_path)
    if doc["arch"] != task.raw.arch():
        print("error: checkpoint architecture does not match the config",
              file=sys.stderr)
        return 1
    observation = load_observation(observation_path)
    gen = RngStream(cfg.seed).child(3).generator
    samples = task.sample(params, cfg, gen, observation)
    samples = np.atleast_2d(samples)[:SAMPLE_ROW_CAP]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(task.columns)
    integral = np.issubdtype(samples.dtype, np.integer)
    for row in samples:
        writer.writerow([int(v) if integral else repr(float(v)) for v in row])
    atomic_write(os.path.join(out_dir, "samples.csv"), buf.getvalue())
    return 0


def verify_command(seed, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    reports = verify.run_all(seed=seed)
    atomic_write(os.path.join(out_dir, "report.json"),
                 json.dumps(reports, indent=2) + "\n")
    for rep in reports:
        print(f"{rep['check']}: {rep['status']} (metric={rep['metric']:.3g})")
    return 0 if all(r["status"] == "pass" for r in reports) else 1


def oracle_command(cfg, out_dir):
    """Brute-force reference values for the configured space."""
    os.makedirs(out_dir, exist_ok=True)
    sched = cfg.schedule
    ts = np.linspace(0.1 * sched.horizon_T, sched.horizon_T, 8)
    out = {"space": cfg.space, "task": cfg.task, "times": ts.tolist()}
    if cfg.space == "euclidean":
        m = np.exp(-0.5 * sched.integrated_beta(ts))
        out["mean_coeff"] = m.tolist()
        out["variance"] = (1.0 - m * m).tolist()
    elif cfg.space == "discrete":
        task = build_task(cfg)
        q0 = task.p_data
        marg = dsc.brute_force_marginals(task.forward, sched, q0, ts)
        out["joint_marginals"] = [q.tolist() for q in marg]
    elif cfg.space == "so3":
        angles = np.linspace(1e-3, np.pi - 1e-3, 64)
        out["angles"] = angles.tolist()
        out["densities"] = {}
        for t in ts:
            k = so3.kernel_for(sched.integrated_beta(float(t)))
            out["densities"][repr(float(t))] = k.angle_density(angles).tolist()
    elif cfg.space == "simplex":
        task = build_task(cfg)
        taus = np.maximum(sched.integrated_beta(ts), 1e-2)
        out["ancestral_mean_counts"] = [
            float(spx.ancestral_coefficients(task.wf, float(tau)).mean())
            for tau in taus]
        out["stationary_mean"] = (task.wf.theta / task.wf.total).tolist()
    atomic_write(os.path.join(out_dir, "oracle.json"),
                 json.dumps(out, indent=2) + "\n")
    return 0


# --- g-and-k experiment -----------------------------------------------------


def gandk_experiment(cfg, out_dir, x_true=(3.0, 1.0, 2.0, 0.5)):
    """Train the amortized posterior, then sample it at observations drawn
    from x_true; writes posterior samples and a summary of posterior means."""
    code = train_command(cfg, out_dir)
    if code != 0:
        return code
    task = build_task(cfg)
    _, params, _, _ = nn.load_checkpoint(os.path.join(out_dir, "checkpoint.json"))
    stream = RngStream(cfg.seed)
    gen = stream.child(4).generator
    theta_true = euc.GandKParams(*x_true)
    xi = euc.gandk_sample(theta_true, task.n_obs, gen)
    cond = task.encode_observation(xi)
    draws = task.posterior_sample(params, cond, cfg.sampler["n_steps"],
                                  cfg.sampler["n_samples"], gen)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(task.columns)
    for row in draws:
        writer.writerow([repr(float(v)) for v in row])
    atomic_write(os.path.join(out_dir, "samples.csv"), buf.getvalue())
    lo, hi = np.quantile(draws, 0.05, axis=0), np.quantile(draws, 0.95, axis=0)
    summary = {"x_true": list(x_true),
               "posterior_mean": draws.mean(axis=0).tolist(),
               "posterior_std": draws.std(axis=0).tolist(),
               "interval_90_low": lo.tolist(), "interval_90_high": hi.tolist()}
    atomic_write(os.path.join(out_dir, "gandk_summary.json"),
                 json.dumps(summary, indent=2) + "\n")
    return 0


# --- entry point ------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dmm", description="Denoising Markov model experiment runner")
    parser.add_argument("command", choices=["train", "sample", "verify", "oracle"])
    parser.add_argument("--config", help="path to the run manifest (INI)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--observation", default=None,
                        help="observation file for conditional sampling")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify" and args.config is None:
            # the verification suite needs no manifest
            out_dir = args.out or os.path.join(
                os.environ.get(OUTPUT_ROOT_ENV, ""), "runs", "verify")
            return verify_command(args.seed or 0, out_dir)
        if args.config is None:
            print("error: --config is required", file=sys.stderr)
            return 2
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out_dir = resolve_out(cfg, args.out)
        if args.command == "train":
            return train_command(cfg, out_dir)
        if args.command == "sample":
            return sample_command(cfg, out_dir, args.observation)
        if args.command == "verify":
            return verify_command(cfg.seed, out_dir)
        return oracle_command(cfg, out_dir)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

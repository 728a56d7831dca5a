"""Command-line pipeline: data generation, teacher training, causal fine-tune,
ODE pairs, student init, distillation, generation, serving, evaluation,
benchmarks, and the ablation grid.

Every subcommand takes --seed and --config (flat key=value file; explicit flags
win) and writes a manifest recording parameters plus SHA-256 hashes of its
inputs and outputs. Artifacts default into $CAUSVID_HOME (./causvid_artifacts
if unset).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import ode as ode_mod
from . import pipeline as pipe
from . import plots
from .distill import DistillConfig, build_distill_state, distill_loop, save_distill_history
from .metrics import MetricReport, bench_latency_throughput, boundary_discontinuity
from .model import ChunkLayout, ModelConfig, load_weights, save_weights
from .schedule import build_schedule
from .teacher import (
    TrainConfig,
    evaluate_teacher,
    finetune_causal_teacher,
    save_loss_history,
    train_bidirectional,
)


def artifact_dir() -> Path:
    root = Path(os.environ.get("CAUSVID_HOME", "causvid_artifacts"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(command: str, params: dict, inputs: list, outputs: list,
                   manifest_path: Path):
    manifest = {
        "command": command,
        "params": {k: v for k, v in sorted(params.items())},
        "inputs": {str(p): sha256_file(p) for p in sorted(map(str, inputs))},
        "outputs": {str(p): sha256_file(p) for p in sorted(map(str, outputs))},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_config_file(path: str) -> dict:
    """Flat key=value lines; '#' starts a comment."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"bad config line (want key=value): {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


class Command:
    """Declarative subcommand: argument registry plus file-config merging."""

    registry: dict[str, "Command"] = {}

    def __init__(self, name: str, run, help_: str):
        self.name = name
        self.run = run
        self.help = help_
        self.args: list[tuple[str, object, dict]] = []
        Command.registry[name] = self

    def add(self, flag: str, default=None, **kw):
        self.args.append((flag, default, kw))
        return self

    def register(self, subparsers):
        p = subparsers.add_parser(self.name, help=self.help)
        p.add_argument("--config", default=None, help="key=value config file; flags override")
        p.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
        for flag, default, kw in self.args:
            if isinstance(default, bool):
                p.add_argument(flag, action="store_true", default=None, **kw)
            else:
                t = kw.pop("type", type(default) if default is not None else str)
                p.add_argument(flag, type=t, default=None, **kw)

    def resolve(self, ns: argparse.Namespace) -> dict:
        file_cfg = read_config_file(ns.config) if ns.config else {}
        defaults = {"seed": 0}
        for flag, default, _ in self.args:
            defaults[flag.lstrip("-").replace("-", "_")] = default
        values = {}
        for dest, default in defaults.items():
            cli_val = getattr(ns, dest, None)
            if cli_val is not None:
                values[dest] = cli_val
            elif dest in file_cfg:
                values[dest] = _coerce(file_cfg[dest], default)
            else:
                values[dest] = default
        missing = [k for k, v in values.items() if v is None and k not in _OPTIONAL]
        if missing:
            raise SystemExit(f"{self.name}: missing required option(s): "
                             + ", ".join("--" + m.replace("_", "-") for m in missing))
        return values


_OPTIONAL = {"student", "strip_png", "out_dir", "out", "window"}


def _out(values: dict, key: str, default_name: str) -> Path:
    given = values.get(key)
    path = Path(given) if given else artifact_dir() / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _model_config(values: dict) -> ModelConfig:
    return ModelConfig(frame_h=values["height"], frame_w=values["width"])


# --- subcommand bodies -------------------------------------------------------

def cmd_gen_data(v: dict) -> int:
    config = data_mod.DataConfig(n_videos=v["videos"], n_frames=v["frames"],
                                 height=v["height"], width=v["width"],
                                 static_fraction=v["static_fraction"])
    dataset = data_mod.generate_dataset(config, seed=v["seed"])
    out = _out(v, "out", "data.cvds")
    data_mod.save_dataset(dataset, out)
    write_manifest("gen-data", v, [], [out], out.with_suffix(".manifest.json"))
    print(f"wrote {out} ({len(dataset)} videos)")
    return 0


def cmd_train_teacher(v: dict) -> int:
    dataset = data_mod.load_dataset(v["data"])
    cfg = TrainConfig(iterations=v["iterations"], batch_size=v["batch_size"], lr=v["lr"],
                      cond_dropout=v["cond_dropout"], seed=v["seed"])
    h, w = dataset.frame_shape[0], dataset.frame_shape[1]
    model, history = train_bidirectional(dataset, cfg,
                                         model_config=ModelConfig(frame_h=h, frame_w=w))
    out = _out(v, "out", "teacher.cvwt")
    save_weights(model, out)
    loss_csv = out.with_suffix(".loss.csv")
    save_loss_history(history, loss_csv)
    plots.save_loss_curve(history, out.with_suffix(".loss.png"), "bidirectional teacher loss")
    write_manifest("train-teacher", v, [v["data"]], [out, loss_csv],
                   out.with_suffix(".manifest.json"))
    print(f"wrote {out} (final loss {history[-1][1]:.4f})")
    return 0


def cmd_finetune_causal(v: dict) -> int:
    dataset = data_mod.load_dataset(v["data"])
    teacher = load_weights(v["teacher"])
    layout = ChunkLayout(dataset.n_frames, v["chunk_frames"])
    cfg = TrainConfig(iterations=v["iterations"], batch_size=v["batch_size"], lr=v["lr"],
                      cond_dropout=v["cond_dropout"], seed=v["seed"])
    model, history = finetune_causal_teacher(teacher, dataset, cfg, layout)
    out = _out(v, "out", "causal_teacher.cvwt")
    save_weights(model, out)
    loss_csv = out.with_suffix(".loss.csv")
    save_loss_history(history, loss_csv)
    plots.save_loss_curve(history, out.with_suffix(".loss.png"), "causal fine-tune loss")
    write_manifest("finetune-causal", v, [v["data"], v["teacher"]], [out, loss_csv],
                   out.with_suffix(".manifest.json"))
    print(f"wrote {out} (final loss {history[-1][1]:.4f})")
    return 0


def cmd_gen_ode_pairs(v: dict) -> int:
    teacher = load_weights(v["teacher"])
    sched = build_schedule(teacher.config.T)
    layout = ChunkLayout(v["frames"], v["chunk_frames"])
    pairs = ode_mod.generate_ode_pairs(teacher, sched, layout, n=v["pairs"],
                                       solver_steps=v["solver_steps"],
                                       guidance=v["guidance"], seed=v["seed"],
                                       batch_size=v["batch_size"])
    out = _out(v, "out", "pairs.cvop")
    ode_mod.save_pairs(pairs, out)
    write_manifest("gen-ode-pairs", v, [v["teacher"]], [out], out.with_suffix(".manifest.json"))
    print(f"wrote {out} ({len(pairs)} pairs)")
    return 0


def cmd_init_student(v: dict) -> int:
    teacher = load_weights(v["teacher"])
    pairs = ode_mod.load_pairs(v["pairs"])
    layout = ChunkLayout(pairs.endpoints.shape[1], v["chunk_frames"])
    student = ode_mod.init_student_from_teacher(teacher)
    cfg = TrainConfig(iterations=v["iterations"], batch_size=v["batch_size"], lr=v["lr"],
                      seed=v["seed"])
    student, history = ode_mod.regress_student(student, pairs, cfg, layout)
    out = _out(v, "out", "student_init.cvwt")
    save_weights(student, out)
    loss_csv = out.with_suffix(".loss.csv")
    save_loss_history(history, loss_csv)
    plots.save_loss_curve(history, out.with_suffix(".loss.png"), "ODE regression loss")
    write_manifest("init-student", v, [v["teacher"], v["pairs"]], [out, loss_csv],
                   out.with_suffix(".manifest.json"))
    print(f"wrote {out} (final loss {history[-1][1]:.4f})")
    return 0


def cmd_distill(v: dict) -> int:
    dataset = data_mod.load_dataset(v["data"])
    teacher = load_weights(v["teacher"])
    student = load_weights(v["student"]) if v.get("student") else None
    layout = ChunkLayout(dataset.n_frames, v["chunk_frames"])
    cfg = DistillConfig(iterations=v["iterations"], batch_size=v["batch_size"],
                        gen_lr=v["gen_lr"], fake_lr=v["fake_lr"], guidance=v["guidance"],
                        ttur_ratio=v["ttur"], seed=v["seed"])
    state = build_distill_state(teacher, student, layout, cfg,
                                teacher_causal=bool(v["causal_teacher_mask"]))
    generator, reports = distill_loop(state, dataset)
    out = _out(v, "out", "student.cvwt")
    save_weights(generator, out)
    hist_csv = out.with_suffix(".history.csv")
    save_distill_history(reports, hist_csv)
    plots.save_loss_curve([(r.iteration, r.fake_loss) for r in reports],
                          out.with_suffix(".fake_loss.png"), "fake score denoising loss")
    inputs = [v["data"], v["teacher"]] + ([v["student"]] if v.get("student") else [])
    write_manifest("distill", v, inputs, [out, hist_csv], out.with_suffix(".manifest.json"))
    print(f"wrote {out} ({state.generator_updates} generator / {state.fake_updates} fake updates)")
    return 0


def cmd_generate(v: dict) -> int:
    student = load_weights(v["weights"])
    from .streaming import GenerationSession

    session = GenerationSession(student, v["chunk_frames"], v["cond"], seed=v["seed"])
    chunks = session.generate_stream(v["chunks"],
                                     window_chunks=v["window"] or None)
    video = torch.cat(chunks, dim=1).numpy().astype(np.float32)
    out = _out(v, "out", "generated.cvds")
    dataset = data_mod.Dataset(np.clip(video, -1.0, 1.0),
                               np.full(video.shape[0], v["cond"], dtype=np.uint32))
    data_mod.save_dataset(dataset, out)
    outputs = [out]
    if v.get("strip_png"):
        plots.save_frame_strip(video[0], v["strip_png"])
        outputs.append(v["strip_png"])
    write_manifest("generate", v, [v["weights"]], outputs, out.with_suffix(".manifest.json"))
    print(f"wrote {out} ({v['chunks']} chunks)")
    return 0


def cmd_serve(v: dict) -> int:
    from .server import ServerConfig, run_server

    config = ServerConfig(host=v["host"], port=v["port"], weights_path=v["weights"],
                          chunk_frames=v["chunk_frames"], max_sessions=v["max_sessions"],
                          frame_budget=v["frame_budget"], heartbeat_s=v["heartbeat"],
                          window_chunks=v["window"] or 0)
    print(f"serving {v['weights']} on ws://{v['host']}:{v['port']}")
    run_server(config)
    return 0


def cmd_eval(v: dict) -> int:
    dataset = data_mod.load_dataset(v["data"])
    model = load_weights(v["weights"])
    layout = ChunkLayout(dataset.n_frames, v["chunk_frames"])
    sched = build_schedule(model.config.T)
    out = _out(v, "out", "eval_report.txt")
    if model.config.predicts == "x0":
        report = pipe.evaluate_student(model, dataset, layout, n_samples=v["samples"],
                                       seed=v["seed"])
        # enough parallel streams that every chunk index pools >= 100 frames
        n_streams = max(v["samples"], -(-100 // layout.chunk_frames) + 2)
        curve = pipe.student_degradation(model, dataset, layout, cond=1,
                                         length_factor=v["length_factor"],
                                         n_streams=n_streams, seed=v["seed"])
        vids = pipe.sample_student_videos(model, layout, 8, cond=1, seed=v["seed"])
        bd = float(np.mean([boundary_discontinuity(x, layout.chunk_frames) for x in vids]))
        report = MetricReport(mmd_per_condition=report.mmd_per_condition, degradation=curve,
                              boundary_discontinuity=bd, seed=v["seed"],
                              config_hash=sha256_file(v["weights"])[:16])
        plots.save_degradation_plot({"student": curve}, out.with_suffix(".degradation.png"))
        out.with_suffix(".degradation.csv").write_text(report.degradation_csv())
    else:
        report = evaluate_teacher(model, dataset, sched, layout, n_samples=v["samples"],
                                  steps=v["teacher_steps"], guidance=v["guidance"],
                                  seed=v["seed"])
    out.write_text(report.to_text())
    plots.save_ablation_bars({f"cond {c}": m for c, m in report.mmd_per_condition.items()},
                             out.with_suffix(".mmd.png"), title="frame-marginal MMD")
    write_manifest("eval", v, [v["weights"], v["data"]], [out], out.with_suffix(".manifest.json"))
    print(out.read_text())
    return 0


def cmd_bench(v: dict) -> int:
    student = load_weights(v["weights"])
    teacher = load_weights(v["teacher"])
    layout = ChunkLayout(v["frames"], v["chunk_frames"])
    from .streaming import GenerationSession

    def factory():
        return GenerationSession(student, v["chunk_frames"], 0, seed=v["seed"])

    bench = bench_latency_throughput(factory, n_chunks=v["chunks"], runs=v["runs"],
                                     window_chunks=layout.n_chunks)
    compare = pipe.latency_comparison(student, teacher, layout, v["frames"],
                                      teacher_steps=v["teacher_steps"],
                                      guidance=v["guidance"], seed=v["seed"])
    report = MetricReport(latency_to_first_chunk_s=bench["latency_to_first_chunk_s"],
                          throughput_fps=bench["throughput_fps"], seed=v["seed"],
                          extras={"teacher_full_video_s": compare["teacher_full_video_s"],
                                  "streaming_first_chunk_s": compare["streaming_first_chunk_s"]})
    out = _out(v, "out", "bench_report.txt")
    out.write_text(report.to_text())
    plots.save_ablation_bars(
        {"stream first chunk (s)": compare["streaming_first_chunk_s"],
         "teacher full video (s)": compare["teacher_full_video_s"]},
        out.with_suffix(".latency.png"), title="latency comparison")
    write_manifest("bench", v, [v["weights"], v["teacher"]], [out],
                   out.with_suffix(".manifest.json"))
    print(out.read_text())
    return 0


def cmd_ablate(v: dict) -> int:
    dataset = data_mod.load_dataset(v["data"])
    teacher = load_weights(v["teacher"])
    causal_teacher = load_weights(v["causal_teacher"]) if v.get("causal_teacher") else None
    pairs = ode_mod.load_pairs(v["pairs"])
    layout = ChunkLayout(dataset.n_frames, v["chunk_frames"])
    distill_cfg = DistillConfig(iterations=v["iterations"], batch_size=v["batch_size"],
                                gen_lr=v["gen_lr"], fake_lr=v["fake_lr"],
                                guidance=v["guidance"], ttur_ratio=v["ttur"], seed=v["seed"])
    regress_cfg = TrainConfig(iterations=v["regress_iterations"], batch_size=v["batch_size"],
                              lr=v["regress_lr"], seed=v["seed"])
    out_dir = Path(v["out_dir"]) if v.get("out_dir") else artifact_dir() / "ablation"
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = pipe.run_ablation_grid(teacher, causal_teacher, dataset, pairs, layout,
                                   distill_cfg, regress_cfg, eval_samples=v["samples"],
                                   eval_seed=v["seed"])
    outputs = []
    summary = {}
    for cell in cells:
        path = out_dir / f"{cell.name.replace('+', '_')}.txt"
        path.write_text(cell.report.to_text())
        outputs.append(path)
        summary[cell.name] = cell.report.mmd_mean
    csv_path = out_dir / "summary.csv"
    csv_path.write_text("cell,mmd_mean\n"
                        + "\n".join(f"{k},{v_!r}" for k, v_ in summary.items()) + "\n")
    outputs.append(csv_path)
    plots.save_ablation_bars(summary, out_dir / "summary.png")
    inputs = [v["data"], v["teacher"], v["pairs"]]
    if v.get("causal_teacher"):
        inputs.append(v["causal_teacher"])
    write_manifest("ablate", v, inputs, outputs, out_dir / "manifest.json")
    for name, value in summary.items():
        print(f"{name}: mmd={value:.5f}")
    return 0


# --- wiring ------------------------------------------------------------------

def build_commands() -> dict[str, Command]:
    Command.registry.clear()
    (Command("gen-data", cmd_gen_data, "render a synthetic labeled video dataset")
     .add("--videos", 400).add("--frames", 20).add("--height", 16).add("--width", 16)
     .add("--static-fraction", 0.0).add("--out"))
    (Command("train-teacher", cmd_train_teacher, "train the bidirectional teacher")
     .add("--data").add("--iterations", 3000).add("--batch-size", 4).add("--lr", 1e-3)
     .add("--cond-dropout", 0.1).add("--out"))
    (Command("finetune-causal", cmd_finetune_causal,
             "fine-tune the bidirectional teacher into the causal baseline")
     .add("--teacher").add("--data").add("--chunk-frames", 4).add("--iterations", 1500)
     .add("--batch-size", 4).add("--lr", 1e-3).add("--cond-dropout", 0.1).add("--out"))
    (Command("gen-ode-pairs", cmd_gen_ode_pairs, "generate teacher ODE solution pairs")
     .add("--teacher").add("--pairs", 1000).add("--frames", 20).add("--chunk-frames", 4)
     .add("--solver-steps", 50).add("--guidance", 3.5).add("--batch-size", 16).add("--out"))
    (Command("init-student", cmd_init_student, "pretrain the student on ODE pairs")
     .add("--teacher").add("--pairs").add("--chunk-frames", 4).add("--iterations", 3000)
     .add("--batch-size", 4).add("--lr", 1e-3).add("--out"))
    (Command("distill", cmd_distill, "asymmetric DMD distillation into the 4-step student")
     .add("--teacher").add("--student").add("--data").add("--chunk-frames", 4)
     .add("--iterations", 6000).add("--batch-size", 4).add("--gen-lr", 2e-4)
     .add("--fake-lr", 1e-3).add("--guidance", 3.5).add("--ttur", 5)
     .add("--causal-teacher-mask", False,
          help="treat the teacher as block-causal (ablation)")
     .add("--out"))
    (Command("generate", cmd_generate, "stream a video with the few-step student")
     .add("--weights").add("--cond", 0).add("--chunks", 5).add("--chunk-frames", 4)
     .add("--window", 0).add("--strip-png").add("--out"))
    (Command("serve", cmd_serve, "run the streaming websocket server")
     .add("--weights").add("--host", "127.0.0.1").add("--port", 8787)
     .add("--chunk-frames", 4).add("--max-sessions", 4).add("--frame-budget", 4000)
     .add("--heartbeat", 20.0).add("--window", 0))
    (Command("eval", cmd_eval, "evaluate a checkpoint (teacher or student)")
     .add("--weights").add("--data").add("--chunk-frames", 4).add("--samples", 24)
     .add("--teacher-steps", 32).add("--guidance", 3.5).add("--length-factor", 4)
     .add("--out"))
    (Command("bench", cmd_bench, "latency/throughput benchmark vs full-video sampling")
     .add("--weights").add("--teacher").add("--frames", 20).add("--chunk-frames", 4)
     .add("--chunks", 20).add("--runs", 5).add("--teacher-steps", 32).add("--guidance", 3.5)
     .add("--out"))
    (Command("ablate", cmd_ablate, "run the teacher/ODE-init ablation grid")
     .add("--teacher").add("--causal-teacher").add("--pairs").add("--data")
     .add("--chunk-frames", 4).add("--iterations", 600).add("--regress-iterations", 600)
     .add("--batch-size", 4).add("--gen-lr", 2e-4).add("--fake-lr", 1e-3)
     .add("--regress-lr", 1e-3).add("--guidance", 3.5).add("--ttur", 5).add("--samples", 24)
     .add("--out-dir"))
    return dict(Command.registry)


def main(argv=None) -> int:
    commands = build_commands()
    parser = argparse.ArgumentParser(prog="causvid",
                                     description="causal video diffusion distillation at desk scale")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for cmd in commands.values():
        cmd.register(subparsers)
    ns = parser.parse_args(argv)
    cmd = commands[ns.command]
    values = cmd.resolve(ns)
    torch.manual_seed(values["seed"])
    return cmd.run(values)


if __name__ == "__main__":
    raise SystemExit(main())

"""
FPMC 命令行工具

子命令：toy / config / build / denoise / sample / finetune / augment / eval / sweep / export-masks
"""
import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import config
from .augment import AugmentPlan, build_augmented, ingest_synthetic, write_ledger
from .classical import (OptimalDenoiser, WienerDenoiser, fit_wiener, load_wiener,
                        save_wiener)
from .constructors import (ScheduleTable, SensitivityMap, build_els, build_ls, build_lukoianov,
                           build_pspc_flex, build_pspc_square, gaussian_bump_maps)
from .core import DiffusionSchedule, ImageGeometry
from .errors import CoverageError, NumericalError, ValidationError
from .estimator import FpmcModel, load_model, save_model
from .evaluation import (SweepResult, compare_samples, denoiser_error_sweep,
                         relative_error_change)
from .finetune import FinetuneConfig, ResponseTable, finetune_model
from .report import generate_report
from .sampler import SamplerConfig, heun_sample
from .storage import (export_pngs, file_digest, image_from_vector, load_dataset, read_json,
                      read_tensor, save_dataset, save_png_grid, tensor_path, write_json,
                      write_tensor)
from .toydata import manifold_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _banner(title: str, lines: List[str]):
    print("\n" + "=" * 50)
    print(title)
    print("=" * 50)
    for line in lines:
        print(line)
    print("=" * 50)


def _geometry(args) -> Optional[ImageGeometry]:
    if args.width and args.height:
        return ImageGeometry(args.width, args.height, args.channels)
    return None


def _out_dir(args) -> Path:
    out = Path(args.out or config.FPMC_OUTPUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_manifest(out_dir: Path, command: str, args, inputs: Dict[str, str],
                       extra: Optional[Dict] = None) -> str:
    """run.json：命令、解析后的配置、种子、输入文件 sha256"""
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    manifest = {
        "command": command,
        "config": resolved,
        "seed": getattr(args, "seed", None),
        "inputs": {name: {"path": str(path), "sha256": file_digest(path)}
                   for name, path in inputs.items() if path},
        "created_at": datetime.now().isoformat(timespec="seconds"),
    }
    if extra:
        manifest.update(extra)
    return write_json(out_dir / "run.json", manifest)


def load_denoiser(path: str):
    """按 manifest 格式加载去噪器：FPMC 模型、Wiener 滤波或最优去噪器"""
    directory = Path(path)
    manifest = read_json(directory / "manifest.json")
    fmt = manifest.get("format")
    if fmt == "fpmc-model":
        return load_model(directory)
    if fmt == "fpmc-wiener":
        if not manifest.get("schedule"):
            raise ValidationError(f"Wiener 模型目录缺少调度信息: {directory}")
        return WienerDenoiser(load_wiener(directory),
                              DiffusionSchedule.from_dict(manifest["schedule"]))
    if fmt == "fpmc-optimal":
        data_path = directory / manifest["dataset"]
        if file_digest(data_path) != manifest["dataset_sha256"]:
            raise ValidationError(f"最优去噪器引用的数据集已改变: {data_path}")
        return OptimalDenoiser(load_dataset(data_path),
                               DiffusionSchedule.from_dict(manifest["schedule"]))
    raise ValidationError(f"无法识别的去噪器目录: {directory} (format={fmt})")


def _schedule_of(denoiser) -> DiffusionSchedule:
    return denoiser.schedule if isinstance(denoiser, FpmcModel) else denoiser.sched


# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------

def cmd_toy(args) -> int:
    geom = ImageGeometry(args.width or 8, args.height or 8, args.channels)
    data = manifold_dataset(args.n, geom, args.seed, args.rank, args.noise)
    out = Path(args.out)
    save_dataset(out, data)
    write_run_manifest(out.parent, "toy", args, {}, {"n": data.n, "output": str(out)})
    print(f"已生成 {data.n} 张 {geom.width}x{geom.height}x{geom.channels} 合成图像: {out}")
    if args.png_dir:
        export_pngs(data.images, geom, args.png_dir, prefix="toy")
        print(f"PNG 已导出: {args.png_dir}")
    return EXIT_OK


def cmd_config(args) -> int:
    if args.threads is None and args.chunk_elements is None:
        print(f"配置文件: {config.ENV_FILE}")
        print(f"FPMC_THREADS={config.get_threads()}")
        print(f"FPMC_CHUNK_ELEMENTS={config.FPMC_CHUNK_ELEMENTS}")
        print(f"FPMC_OUTPUT_DIR={config.FPMC_OUTPUT_DIR}")
        return EXIT_OK
    config.save_config(args.threads, args.chunk_elements)
    print(f"配置已保存到: {config.ENV_FILE}")
    return EXIT_OK


def _build_table(args, method: str) -> ScheduleTable:
    if args.table:
        return ScheduleTable.load(args.table)
    return ScheduleTable.from_preset(args.preset, method)


def cmd_build(args) -> int:
    method = args.method
    out = _out_dir(args)
    data = load_dataset(args.data, _geometry(args))
    _banner("FPMC 构建", [f"方法: {method}", f"数据集: {args.data} (N={data.n}, d={data.d})",
                         f"输出目录: {out}"])

    print("\n[步骤1] 构建去噪器...")
    table_info = None
    model = None
    if method in ("optimal", "wiener"):
        num_steps = args.num_steps or config.PRESETS[args.preset]["num_steps"]
        sched = DiffusionSchedule.edm(num_steps, kind=args.schedule)
        if method == "optimal":
            data_file = "dataset" + config.TENSOR_SUFFIX
            save_dataset(out / data_file, data, dtype="f64")
            write_json(out / "manifest.json",
                       {"format": "fpmc-optimal", "version": 1, "method": "optimal",
                        "geometry": data.geometry.to_dict(), "schedule": sched.to_dict(),
                        "dataset": data_file, "dataset_sha256": file_digest(out / data_file)})
        else:
            save_wiener(fit_wiener(data), out, sched)
    elif method == "lukoianov":
        tau = args.tau if args.tau is not None else config.PRESETS[args.preset]["lukoianov"]
        num_steps = args.num_steps or config.PRESETS[args.preset]["num_steps"]
        sched = DiffusionSchedule.edm(num_steps, kind=args.schedule)
        model = build_lukoianov(fit_wiener(data), tau, data, sched)
        save_model(model, out)
        table_info = {"tau": tau}
    else:
        table = _build_table(args, method)
        table_info = table.to_list()
        if method == "pspc-square":
            model = build_pspc_square(table, data)
        elif method == "ls":
            model = build_ls(table, data)
        elif method == "els":
            model = build_els(table, data)
        else:
            if args.maps:
                maps = SensitivityMap.load(args.maps)
            elif args.synthetic_maps:
                maps = gaussian_bump_maps(data.geometry, table.times)
            else:
                raise ValidationError("pspc-flex 需要 --maps 或 --synthetic-maps")
            model = build_pspc_flex(maps, table, data)
        save_model(model, out)

    print("\n[步骤2] 写入运行清单...")
    excluded = model.meta.get("self_exclusion", []) if model is not None else []
    if excluded:
        print(f"⚠️ {len(excluded)} 个调度步存在不包含自身的掩码，详见 run.json")
    write_run_manifest(out, "build", args,
                       {"data": args.data, "table": args.table, "maps": args.maps},
                       {"method": method, "table": table_info, "self_exclusion": excluded})
    print(f"模型已保存: {out}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    denoiser = load_denoiser(args.model)
    sched = _schedule_of(denoiser)
    z, header = read_tensor(args.input)
    if args.step is not None:
        t = float(sched.t_grid[args.step])
    elif args.t is not None:
        t = float(args.t)
    else:
        raise ValidationError("请指定 --step 或 --t")
    out = denoiser(z, t)
    path = Path(write_tensor(args.out, np.atleast_2d(out), int(header["w"]), int(header["h"]),
                             int(header["c"]), dtype="f64"))
    write_run_manifest(path.parent, "denoise", args, {"model": args.model, "input": args.input},
                       {"t": t, "output": str(path)})
    print(f"去噪完成: {z.shape[0]} 个输入, t={t:.4g} -> {args.out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    denoiser = load_denoiser(args.model)
    out = _out_dir(args)
    geom = denoiser.geometry
    _banner("FPMC 采样", [f"模型: {args.model}", f"样本数: {args.n}", f"种子: {args.seed}"])

    print("\n[步骤1] Heun 求解 PF-ODE...")
    cfg = SamplerConfig(_schedule_of(denoiser), denoiser, args.seed, args.n, geom.d,
                        record_trajectory=args.trajectory)
    result = heun_sample(cfg)

    print("\n[步骤2] 保存样本...")
    write_tensor(tensor_path(out, "samples"), result.x, geom.width, geom.height, geom.channels)
    export_pngs(result.x, geom, out / "png")
    save_png_grid(result.x, geom, out / "grid.png")
    if args.trajectory:
        times = [t for t, _ in result.trajectory]
        states = np.concatenate([z for _, z in result.trajectory])
        write_tensor(tensor_path(out, "trajectory"), states, geom.width, geom.height,
                     geom.channels, extra={"times": times, "batch": args.n})
    write_run_manifest(out, "sample", args, {"model": args.model},
                       {"noise_digest": result.noise_digest,
                        "evals_per_sample": result.n_evals})
    print(f"每个样本去噪器调用 {result.n_evals} 次, 初始噪声摘要 {result.noise_digest[:16]}")
    print(f"样本已保存: {out}")
    return EXIT_OK


def _parse_steps(text: Optional[str], num_steps: int) -> List[int]:
    if not text:
        return list(range(num_steps))
    steps: List[int] = []
    for part in text.split(","):
        if ":" in part:
            a, b = part.split(":")
            steps.extend(range(int(a), int(b)))
        else:
            steps.append(int(part))
    for k in steps:
        if not 0 <= k < num_steps:
            raise ValidationError(f"调度步越界: {k} (共 {num_steps} 步)")
    return steps


def cmd_finetune(args) -> int:
    model = load_model(args.model)
    out = _out_dir(args)
    steps = _parse_steps(args.steps, model.schedule.num_steps)
    _banner("FPMC 微调", [f"模型: {args.model} ({model.method})", f"目标: {args.target}",
                         f"调度步: {steps}", f"模式: {args.which}"])

    print("\n[步骤1] 准备目标去噪器...")
    train_data = load_dataset(args.train_data) if args.train_data else None
    validation = load_dataset(args.validation) if args.validation else None
    if args.target_kind == "oracle":
        targets = OptimalDenoiser(load_dataset(args.target), model.schedule)
    elif args.target_kind == "model":
        targets = load_denoiser(args.target)
    else:
        targets = {k: ResponseTable.load(Path(args.target) / f"step_{k:03d}") for k in steps}

    print("\n[步骤2] 逐步微调...")
    cfg = FinetuneConfig(which=args.which, loss_weight=args.loss_weight,
                         learning_rate=args.lr, batch_size=args.batch_size,
                         max_steps=args.max_steps, mc_support_size=args.mc_support_size,
                         seed=args.seed, mask_batch=not args.no_mask_batch,
                         weight_decay=args.weight_decay)
    tuned, results = finetune_model(model, targets, cfg, steps, train_data, validation,
                                    args.preset, out / "logs")
    save_model(tuned, out / "model")

    print("\n[步骤3] 写入运行清单...")
    summary = [{"step": k, "baseline_val_mse": r.baseline_val_mse,
                "best_val_mse": r.best_val_mse, "best_epoch": r.best_epoch}
               for k, r in zip(steps, results)]
    write_run_manifest(out, "finetune", args, {"model": args.model, "target": args.target},
                       {"finetune": cfg.to_dict(), "summary": summary})
    for row in summary:
        print(f"  第 {row['step']:>2} 步: 验证 MSE {row['baseline_val_mse']:.6g} -> "
              f"{row['best_val_mse']:.6g} (epoch {row['best_epoch']})")
    print(f"微调模型已保存: {out / 'model'}")
    return EXIT_OK


def cmd_augment(args) -> int:
    data = load_dataset(args.data, _geometry(args))
    out = _out_dir(args)
    inputs = {"data": args.data}
    if args.synthetic:
        synthetic = load_dataset(args.synthetic, data.geometry)
        count = synthetic.n if args.synthetic_count is None else args.synthetic_count
        union = ingest_synthetic(data, synthetic, count, _read_seeds(args.synthetic_seeds),
                                 _read_seeds(args.eval_seeds))
        labels = []
        inputs["synthetic"] = args.synthetic
    else:
        plan = AugmentPlan(args.strategy, args.fraction, args.seed)
        union, labels = build_augmented(data, plan)
        write_ledger(out / "ledger.jsonl", labels, offset=data.n)
    save_dataset(out / ("dataset" + config.TENSOR_SUFFIX), union)
    write_run_manifest(out, "augment", args, inputs,
                       {"n_original": data.n, "n_total": union.n})
    print(f"增强完成: {data.n} -> {union.n} 张 ({len(labels)} 张带标签), 输出: {out}")
    return EXIT_OK


def _read_seeds(path: Optional[str]) -> Optional[List[int]]:
    if not path:
        return None
    data = read_json(path)
    return [int(s) for s in (data["seeds"] if isinstance(data, dict) else data)]


def cmd_eval(args) -> int:
    out = _out_dir(args)
    reference, _ = read_tensor(args.reference)
    samples, inputs = {}, {"reference": args.reference}
    for item in args.samples:
        name, _, path = item.partition("=")
        if not path:
            raise ValidationError(f"样本参数格式应为 名称=路径: {item}")
        samples[name], _ = read_tensor(path)
        inputs[f"samples:{name}"] = path
    report = compare_samples(samples, reference, Path(args.reference).stem)
    report.save(out)
    generate_report(str(out), comparison=report)
    write_run_manifest(out, "eval", args, inputs)
    print(report.to_text())
    return EXIT_OK


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    denoiser = load_denoiser(args.model)
    target = load_denoiser(args.target)
    data = load_dataset(args.data, _geometry(args))
    sched = _schedule_of(denoiser)
    t_list = [float(t) for t in args.t] if args.t else list(sched.t_grid)
    sweep = denoiser_error_sweep(denoiser, target, data, t_list, args.n_per_t, args.seed,
                                 sched, args.batch_size)
    write_json(out / "sweep.json", sweep.to_dict())
    sweep.write_csv(out / "sweep.csv")
    sweeps = {Path(args.model).name or "model": sweep}
    baseline_name = None
    if args.baseline:
        baseline = SweepResult.from_dict(read_json(args.baseline))
        change = relative_error_change(baseline, sweep)
        baseline_name = "baseline"
        sweeps = {baseline_name: baseline, **sweeps}
        for t, c in zip(sweep.t, change):
            print(f"  t={t:.4g}: 相对误差变化 {c:+.2f}%")
    generate_report(str(out), sweeps=sweeps, baseline=baseline_name)
    write_run_manifest(out, "sweep", args, {"model": args.model, "target": args.target,
                                            "data": args.data, "baseline": args.baseline})
    print(f"扫描完成: {len(t_list)} 个 t 值, 输出: {out}")
    return EXIT_OK


def mask_to_image(vec: np.ndarray, geom: ImageGeometry):
    """q 或 r 向量按最大值缩放到 [0, 1] 后转为图像"""
    vec = np.asarray(vec, dtype=np.float64)
    peak = vec.max()
    scaled = vec / peak if peak > 0 else np.zeros_like(vec)
    return image_from_vector(2.0 * scaled - 1.0, geom)


def cmd_export_masks(args) -> int:
    model = load_model(args.model)
    out = _out_dir(args)
    step = model.steps[args.step]
    matrix = step.Q if args.which == "q" else step.R
    indices = args.index if args.index else range(step.size)
    for i in indices:
        if not 0 <= i < step.size:
            raise ValidationError(f"估计器序号越界: {i} (共 {step.size} 个)")
        mask_to_image(matrix[i], model.geometry).save(
            out / f"step_{args.step:03d}_{args.which}_{i:05d}.png")
    print(f"已导出 {len(list(indices))} 张掩码图像: {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# 参数解析
# ---------------------------------------------------------------------------

def build_parser() -> Tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="fpmc",
        description="FPMC - 无网络的解析扩散去噪器：构建、采样、微调与评测",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例:
  python main.py toy --n 200 --out toy.fpmc
  python main.py build --method pspc-square --data toy.fpmc --table table.json --out runs/pspc
  python main.py sample --model runs/pspc --n 16 --seed 0 --out runs/pspc_samples
  python main.py finetune --model runs/pspc --target big.fpmc --steps 6:9 --which q

环境变量:
  FPMC_THREADS         并行线程数（默认: CPU 核数）
  FPMC_CHUNK_ELEMENTS  单个残差块的最大元素数（默认: 2e7）
  FPMC_OUTPUT_DIR      默认输出目录（默认: ./fpmc_runs）
        """
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON 配置文件，命令行参数优先")
    common.add_argument("--threads", type=int, help="并行线程数（也可通过 FPMC_THREADS 设置）")
    common.add_argument("--seed", type=int, default=0, help="随机种子")
    common.add_argument("--out", "-o", help="输出路径")
    common.add_argument("--width", type=int, help="图像宽度（读取 PNG 时必填）")
    common.add_argument("--height", type=int, help="图像高度（读取 PNG 时必填）")
    common.add_argument("--channels", type=int, default=1, help="通道数（默认: 1）")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", parents=[common], help="生成合成流形数据集")
    p.add_argument("--n", type=int, default=200, help="图像数")
    p.add_argument("--rank", type=int, default=3, help="流形维数")
    p.add_argument("--noise", type=float, default=0.05, help="逐像素噪声标准差")
    p.add_argument("--png-dir", help="同时导出 PNG 的目录")
    p.set_defaults(func=cmd_toy, out="toy" + config.TENSOR_SUFFIX)

    p = sub.add_parser("config", parents=[common], help="查看或保存运行配置")
    p.add_argument("--chunk-elements", type=int, help="单个残差块的最大元素数")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("build", parents=[common], help="构建去噪器")
    p.add_argument("--method", "-m", required=True, choices=config.BUILD_METHODS)
    p.add_argument("--data", "-d", required=True, help="数据集（PNG 目录或 .fpmc 文件）")
    p.add_argument("--preset", default="cifar10", choices=sorted(config.PRESETS),
                   help="超参数预设（默认: cifar10）")
    p.add_argument("--table", help="超参数表 JSON，覆盖预设")
    p.add_argument("--tau", type=float, help="Lukoianov 阈值")
    p.add_argument("--num-steps", type=int, help="EDM 网格步数（optimal/wiener/lukoianov）")
    p.add_argument("--schedule", default="edm", choices=["edm", "vp"], help="调度参数化")
    p.add_argument("--maps", help="PSPC-Flex 敏感度图目录")
    p.add_argument("--synthetic-maps", action="store_true", help="使用合成高斯敏感度图")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("denoise", parents=[common], help="对张量文件去噪")
    p.add_argument("--model", required=True, help="去噪器目录")
    p.add_argument("--input", "-i", required=True, help="含 z 的 .fpmc 文件")
    p.add_argument("--step", type=int, help="调度步序号")
    p.add_argument("--t", type=float, help="时间 t（FPMC 模型须为网格时间）")
    p.set_defaults(func=cmd_denoise, out="denoised" + config.TENSOR_SUFFIX)

    p = sub.add_parser("sample", parents=[common], help="Heun 采样")
    p.add_argument("--model", required=True, help="去噪器目录")
    p.add_argument("--n", type=int, default=16, help="样本数")
    p.add_argument("--trajectory", action="store_true", help="记录轨迹")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("finetune", parents=[common], help="微调 Q/R")
    p.add_argument("--model", required=True, help="FPMC 模型目录")
    p.add_argument("--target", required=True, help="目标：数据集 / 去噪器目录 / 响应表目录")
    p.add_argument("--target-kind", default="oracle", choices=["oracle", "model", "responses"])
    p.add_argument("--steps", help="调度步，如 6:9 或 3,5,7（默认全部）")
    p.add_argument("--which", default="joint", choices=["q", "r", "joint"])
    p.add_argument("--lr", type=float, default=config.FINETUNE_DEFAULTS["learning_rate"])
    p.add_argument("--batch-size", type=int, default=config.FINETUNE_DEFAULTS["batch_size"])
    p.add_argument("--max-steps", type=int, default=config.FINETUNE_DEFAULTS["max_steps"])
    p.add_argument("--loss-weight", type=float, default=config.FINETUNE_DEFAULTS["loss_weight"])
    p.add_argument("--weight-decay", type=float, default=0.0, help="未指定 --preset 时使用")
    p.add_argument("--mc-support-size", type=int, help="蒙特卡洛源子采样大小")
    p.add_argument("--no-mask-batch", action="store_true", help="关闭 leave-batch-out")
    p.add_argument("--preset", choices=sorted(config.PRESETS), help="按预设阈值设置 weight decay")
    p.add_argument("--train-data", help="训练 x 来源（默认为模型的源数据集）")
    p.add_argument("--validation", help="验证集")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("augment", parents=[common], help="源数据增强")
    p.add_argument("--data", "-d", required=True, help="数据集")
    p.add_argument("--strategy", default="hflip", choices=config.AUGMENT_STRATEGIES)
    p.add_argument("--fraction", type=float, default=1.0, help="|D'| / |D|，如 0.2、1、20")
    p.add_argument("--synthetic", help="外部合成数据集（替代几何增强）")
    p.add_argument("--synthetic-count", type=int, help="并入的合成图像数")
    p.add_argument("--synthetic-seeds", help="合成数据种子清单 JSON")
    p.add_argument("--eval-seeds", help="评测种子清单 JSON")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("eval", parents=[common], help="样本比较 (MSE / r²)")
    p.add_argument("--reference", required=True, help="参考样本 .fpmc")
    p.add_argument("--samples", nargs="+", required=True, help="名称=样本文件 ...")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="按 t 的去噪误差扫描")
    p.add_argument("--model", required=True, help="待评测去噪器目录")
    p.add_argument("--target", required=True, help="目标去噪器目录")
    p.add_argument("--data", "-d", required=True, help="held-out 数据集")
    p.add_argument("--t", nargs="+", help="t 列表（默认模型网格）")
    p.add_argument("--n-per-t", type=int, default=1000)
    p.add_argument("--batch-size", type=int, help="评估分块大小")
    p.add_argument("--baseline", help="基线 sweep.json，输出相对误差变化")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-masks", parents=[common], help="导出 q/r 掩码为 PNG")
    p.add_argument("--model", required=True, help="FPMC 模型目录")
    p.add_argument("--step", type=int, required=True, help="调度步序号")
    p.add_argument("--which", default="q", choices=["q", "r"])
    p.add_argument("--index", type=int, nargs="+", help="估计器序号（默认全部）")
    p.set_defaults(func=cmd_export_masks)
    return parser, dict(sub.choices)


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """解析参数；--config 中的键作为子命令默认值，命令行显式参数优先"""
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"配置文件不存在: {path}")
        values = json.loads(path.read_text(encoding="utf-8"))
        commands[args.command].set_defaults(**{k.replace("-", "_"): v for k, v in values.items()})
        args = parser.parse_args(argv)
    return args


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(argv)
        if args.threads:
            config.FPMC_THREADS = str(args.threads)
        code = args.func(args)
    except CoverageError as e:
        print(f"\n❌ 覆盖检查失败 (步 {e.step}, 像素 {e.pixel}): {e}")
        code = EXIT_VALIDATION
    except (ValidationError, FileNotFoundError) as e:
        print(f"\n❌ 错误: {e}")
        code = EXIT_VALIDATION
    except NumericalError as e:
        print(f"\n❌ 数值错误 (步 {e.step}): {e}")
        code = EXIT_NUMERICAL
    return code


if __name__ == "__main__":
    sys.exit(main())

import argparse
import logging
import sys
from pathlib import Path

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

from app.config import LOG_LEVEL
from app.errors import ConfigError, InvalidInputError, SolverFailureError
from app.exporters.csv_export import (
    export_convergence,
    export_final_state,
    export_series,
    export_side_by_side,
    export_trajectory,
)
from app.exporters.markdown import export_markdown, last_rates
from app.loaders.config_loader import load_config
from app.schemas.config import RunConfig
from app.services.analysis import convergence_study, dissipation_series, fp_reference_series
from app.services.energy import fp_equilibrium, potential_for, species_mass
from app.services.euler_fv import run_euler_flow
from app.services.ljko_solver import run_flow
from app.services.scenarios import build_mesh, build_scenario

logger = logging.getLogger("wgf_fv")

SCHEMES = {"ljko": run_flow, "euler": run_euler_flow}


def banner(title: str) -> None:
    print("\n" + "=" * 70)
    print(title)
    print("=" * 70)


def _require_fokker_planck(config: RunConfig, command: str) -> None:
    if config.energy.kind != "fokker_planck":
        raise ConfigError(f"'{command}' compares against the Fokker-Planck solution; got energy '{config.energy.kind}'")


def cmd_run(config: RunConfig) -> int:
    banner(f"🚀 RUN: {config.scheme} scheme, {config.energy.kind} energy")
    scenario = build_scenario(config)
    print(f"📐 Mesh: {scenario.mesh.n_cells} cells, h = {scenario.mesh.h:.4g}")
    trajectory = SCHEMES[config.scheme](
        scenario.mesh, scenario.energy, scenario.rho0, config.t_end, config.newton, tau=config.tau, t0=config.t0
    )
    print(f"✓ {len(trajectory) - 1} steps to t = {trajectory.times[-1]:.6g}")

    banner("📦 EXPORTING RESULTS")
    out = Path(config.output_dir)
    outputs = [
        export_trajectory(trajectory, out / "trajectory.csv"),
        export_final_state(scenario.mesh, trajectory.final.rho, out / "final_state.csv"),
    ]
    for path in outputs:
        print(f"  ✓ {path}")
    drift = abs(species_mass(scenario.mesh, trajectory.final.rho) - trajectory.masses[0]).max()
    print(f"\n💡 Energy {trajectory.energies[0]:.10g} -> {trajectory.energies[-1]:.10g}, mass drift {drift:.2e}")
    return 0


def cmd_convergence(config: RunConfig) -> int:
    _require_fokker_planck(config, "convergence")
    banner(f"🔬 CONVERGENCE: {config.convergence.levels} levels on [{config.t0}, {config.t_end}]")
    mesh = build_mesh(config.mesh)
    tables = {}
    for scheme in ("euler", "ljko"):
        print(f"▶️  {scheme} ...")
        tables[scheme] = convergence_study(
            mesh,
            config.convergence.levels,
            config.tau,
            config.t0,
            config.t_end,
            g=config.energy.g,
            scheme=scheme,
            refine=config.convergence.refine,
            jobs=config.jobs,
            config=config.newton,
        )
        print(f"✓ {scheme}: {last_rates(tables[scheme])}")

    banner("📦 EXPORTING RESULTS")
    out = Path(config.output_dir)
    outputs = [export_side_by_side(tables["euler"], tables["ljko"], out / "convergence.csv")]
    for scheme, rows in tables.items():
        outputs.append(export_convergence(rows, out / f"convergence_{scheme}.csv"))
    outputs.append(export_markdown(tables, out / "convergence.md"))
    for path in outputs:
        print(f"  ✓ {path}")
    return 0


def cmd_dissipation(config: RunConfig) -> int:
    _require_fokker_planck(config, "dissipation")
    banner(f"📉 DISSIPATION: fixed tau = {config.tau:g} on [{config.t0}, {config.t_end}]")
    scenario = build_scenario(config)
    newton = config.newton.model_copy(update={"adaptive": False})
    mass = float(species_mass(scenario.mesh, scenario.rho0)[0])
    reference = scenario.energy.value(fp_equilibrium(scenario.mesh, potential_for(config.energy), mass))

    series = {}
    for scheme, run in SCHEMES.items():
        trajectory = run(scenario.mesh, scenario.energy, scenario.rho0, config.t_end, newton, tau=config.tau, t0=config.t0)
        series[scheme] = dissipation_series(trajectory, scenario.energy, reference)
        print(f"✓ {scheme}: {len(trajectory) - 1} steps")
    series["exact"] = fp_reference_series(series["ljko"]["t"], config.energy.g)

    banner("📦 EXPORTING RESULTS")
    out = Path(config.output_dir)
    for name, frame in series.items():
        print(f"  ✓ {export_series(frame, out / f'dissipation_{name}.csv')}")
    return 0


COMMANDS = {"run": cmd_run, "convergence": cmd_convergence, "dissipation": cmd_dissipation}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wgf-fv", description="Finite-volume Wasserstein gradient flows")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="INI run configuration")
        cmd.add_argument("--scheme", choices=sorted(SCHEMES), help="override [run] scheme")
        cmd.add_argument("--jobs", type=int, help="worker processes for convergence levels")
        cmd.add_argument("--output-dir", help="override [run] output_dir")
        cmd.add_argument("--verbose", action="store_true", help="log Newton iterations")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else LOG_LEVEL.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config, scheme=args.scheme, jobs=args.jobs, output_dir=args.output_dir)
        status = COMMANDS[args.command](config)
    except SolverFailureError as e:
        print(f"❌ Solver failure: {e}")
        return 3
    except InvalidInputError as e:
        print(f"❌ Invalid input: {e}")
        return 2
    banner("✅ DONE")
    return status


if __name__ == "__main__":
    sys.exit(main())

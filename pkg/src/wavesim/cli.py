"""Command-line front-end: thin wrapper over the harness."""

from __future__ import annotations

import sys

import click

from .harness import run


@click.command(name="simulate")
@click.option("--netlist", required=True, type=click.Path(), help="SPICE-subset netlist file.")
@click.option("--method", type=click.Choice(["wavelet", "transient", "both"]),
              default="both", show_default=True)
@click.option("--tol", type=float, default=1e-4, show_default=True,
              help="Target accuracy of the adaptive Galerkin solve.")
@click.option("--reltol", type=float, default=1e-4, show_default=True,
              help="Relative tolerance of the transient reference solve.")
@click.option("--order", type=int, default=4, show_default=True, help="Spline order k.")
@click.option("--max-level", type=int, default=8, show_default=True,
              help="Maximal refinement level per interval.")
@click.option("--no-splitting", is_flag=True, help="Disable interval splitting on failure.")
@click.option("--out-dir", type=click.Path(), default=".", show_default=True)
@click.option("--sweep", "sweep_spec", default=None, metavar="T1,T2,...",
              help="Run a tolerance-ladder sweep instead of a single solve.")
def main(netlist, method, tol, reltol, order, max_level, no_splitting, out_dir, sweep_spec):
    """Simulate a circuit with the adaptive spline-Galerkin solver and/or the
    classical transient reference, writing waveform CSVs and a JSON report."""
    ladder = None
    if sweep_spec is not None:
        try:
            ladder = [float(t) for t in sweep_spec.split(",") if t.strip()]
            if not ladder or any(t <= 0 for t in ladder):
                raise ValueError
        except ValueError:
            print(f"error: invalid sweep ladder: {sweep_spec!r}", file=sys.stderr)
            sys.exit(1)
    out = run(
        netlist,
        method=method,
        tol=tol,
        reltol=reltol,
        order=order,
        max_level=max_level,
        splitting=not no_splitting,
        out_dir=out_dir,
        ladder=ladder,
    )
    for f in out.files:
        print(f)
    sys.exit(out.exit_code)


if __name__ == "__main__":
    main()

"""Command-line front end.

Every subcommand is a thin HTTP client of the service app: by default the
requests are dispatched in-process (no socket), while ``--server`` points the
same commands at a remotely served instance.

Exit codes: 0 success, 2 configuration error, 3 infeasibility, 4 solver
failure.
"""

import csv
import json
import sys

import click
import httpx

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_SOLVER = 4

_KIND_EXIT = {"config": EXIT_CONFIG, "infeasible": EXIT_INFEASIBLE, "solver": EXIT_SOLVER}


def _client(server):
    if server:
        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from starlette.testclient import TestClient

    from .service.app import app

    return TestClient(app, raise_server_exceptions=False)


def _post(ctx, path, payload):
    with _client(ctx.obj.get("server")) as client:
        resp = client.post(path, json=payload)
    if resp.status_code >= 400:
        try:
            err = resp.json()["error"]
            kind, message = err["kind"], err["message"]
        except Exception:
            kind, message = "solver", f"service error (HTTP {resp.status_code})"
        click.echo(f"error ({kind}): {message}", err=True)
        sys.exit(_KIND_EXIT.get(kind, EXIT_SOLVER))
    return resp.json()


def _load_config(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        click.echo(f"error (config): cannot read {path}: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _read_gains_entries(path):
    expected = ["k", "subsystem", "row", "col", "value"]
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != expected:
                raise ValueError(f"header must be {','.join(expected)}")
            return [
                {
                    "k": int(rec["k"]),
                    "subsystem": int(rec["subsystem"]),
                    "row": int(rec["row"]),
                    "col": int(rec["col"]),
                    "value": float(rec["value"]),
                }
                for rec in reader
            ]
    except (OSError, ValueError, KeyError) as exc:
        click.echo(f"error (config): cannot read gains {path}: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Base URL of a running service (default: in-process).")
@click.pass_context
def main(ctx, server):
    """Distributed stability-constrained state estimation toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@main.command()
@click.option("--g", type=float, required=True, help="Coupling strength.")
@click.option("--emit", type=click.Path(dir_okay=False), default=None,
              help="Write the model JSON here instead of stdout.")
@click.pass_context
def example(ctx, g, emit):
    """Emit the three-subsystem benchmark model at coupling strength g."""
    doc = _post(ctx, "/example", {"g": g})
    text = json.dumps(doc, indent=2)
    if emit:
        with open(emit, "w") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--lambda", "lam", type=float, required=True)
@click.option("--rho", type=float, default=0.9, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Write the beta table CSV here instead of stdout.")
@click.pass_context
def beta(ctx, config_path, lam, rho, out):
    """Compute offline per-subsystem contraction caps (beta table)."""
    doc = _post(ctx, "/beta", {
        "config": _load_config(config_path), "lambda": lam, "rho": rho,
    })
    rows = [(r["subsystem"], repr(r["alpha"]), repr(r["beta"])) for r in doc["rows"]]
    if out:
        _write_rows(out, ["subsystem", "alpha", "beta"], rows)
    else:
        click.echo("subsystem,alpha,beta")
        for row in rows:
            click.echo(",".join(str(v) for v in row))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--gains", "gains_path", required=True, type=click.Path(dir_okay=False))
@click.option("--lambda", "lam", type=float, required=True)
@click.option("--eta", type=float, default=100.0, show_default=True)
@click.pass_context
def check(ctx, config_path, gains_path, lam, eta):
    """Verify recorded gains against the per-step stability conditions."""
    doc = _post(ctx, "/check", {
        "config": _load_config(config_path),
        "gains": _read_gains_entries(gains_path),
        "lambda": lam,
        "eta": eta,
    })
    for step in doc["steps"]:
        for s in step["subsystems"]:
            click.echo(
                f"k={step['k']} subsystem={s['subsystem']} "
                f"contraction={s['contraction']:.6g} gain={s['gain_norm']:.6g} "
                f"{'ok' if s['ok'] else 'FAIL'}"
            )
        for p in step["pairs"]:
            i, j = p["pair"]
            click.echo(
                f"k={step['k']} pair=({i},{j}) "
                f"max_eig={p['max_eigenvalue']:.6g} {'ok' if p['ok'] else 'FAIL'}"
            )
        click.echo(
            f"k={step['k']} centralized={'ok' if step['centralized_ok'] else 'FAIL'}"
        )
    click.echo("PASS" if doc["passed"] else "FAIL")
    if not doc["passed"]:
        sys.exit(EXIT_INFEASIBLE)


def _sim_payload(config_doc, horizon, seed, mode, lam, eta, rho, p0):
    return {
        "config": config_doc, "horizon": horizon, "seed": seed, "mode": mode,
        "lambda": lam, "eta": eta, "rho": rho, "p0": p0,
    }


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--horizon", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--mode", type=click.Choice(["ideal", "delayed"]), default="delayed",
              show_default=True)
@click.option("--lambda", "lam", type=float, default=0.6, show_default=True)
@click.option("--eta", type=float, default=100.0, show_default=True)
@click.option("--rho", type=float, default=0.9, show_default=True)
@click.option("--p0", type=float, default=1.0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Trace CSV output path.")
@click.option("--gains", "gains_out", type=click.Path(dir_okay=False), default=None,
              help="Gains CSV output path.")
@click.option("--report", "report_out", type=click.Path(dir_okay=False), default=None,
              help="Gain-design report JSON output path.")
@click.pass_context
def simulate(ctx, config_path, horizon, seed, mode, lam, eta, rho, p0,
             out, gains_out, report_out):
    """One closed-loop run: design gains, simulate, estimate."""
    doc = _post(ctx, "/simulate", _sim_payload(
        _load_config(config_path), horizon, seed, mode, lam, eta, rho, p0,
    ))
    if out:
        _write_rows(out, ["k", "subsystem", "component", "x", "xhat"], [
            (r["k"], r["subsystem"], r["component"], repr(r["x"]), repr(r["xhat"]))
            for r in doc["trace"]
        ])
    if gains_out:
        _write_rows(gains_out, ["k", "subsystem", "row", "col", "value"], [
            (r["k"], r["subsystem"], r["row"], r["col"], repr(r["value"]))
            for r in doc["gains"]
        ])
    if report_out:
        with open(report_out, "w") as fh:
            json.dump(doc["report"], fh, indent=2)
    if not (out or gains_out or report_out):
        click.echo(json.dumps({"steps": horizon, "gains": len(doc["gains"])}))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--runs", type=int, default=100, show_default=True)
@click.option("--horizon", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--mode", type=click.Choice(["ideal", "delayed"]), default="delayed",
              show_default=True)
@click.option("--lambda", "lam", type=float, default=0.6, show_default=True)
@click.option("--eta", type=float, default=100.0, show_default=True)
@click.option("--rho", type=float, default=0.9, show_default=True)
@click.option("--p0", type=float, default=1.0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="MSE CSV output path.")
@click.pass_context
def mc(ctx, config_path, runs, horizon, seed, mode, lam, eta, rho, p0, out):
    """Monte Carlo evaluation: per-step MSE and its time average."""
    payload = _sim_payload(_load_config(config_path), horizon, seed, mode,
                           lam, eta, rho, p0)
    payload["runs"] = runs
    doc = _post(ctx, "/mc", payload)
    rows = [(r["k"], repr(r["mse"])) for r in doc["mse"]]
    if out:
        _write_rows(out, ["k", "mse"], rows)
    click.echo(f"amse={doc['amse']!r}")


@main.command("sweep-g")
@click.option("--g", "g_list", required=True,
              help="Comma-separated coupling strengths.")
@click.option("--runs", type=int, default=100, show_default=True)
@click.option("--horizon", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--mode", type=click.Choice(["ideal", "delayed"]), default="delayed",
              show_default=True)
@click.option("--lambda", "lam", type=float, default=0.6, show_default=True)
@click.option("--eta", type=float, default=100.0, show_default=True)
@click.option("--rho", type=float, default=0.9, show_default=True)
@click.option("--p0", type=float, default=1.0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="AMSE CSV output path.")
@click.option("--beta-out", type=click.Path(dir_okay=False), default=None,
              help="Optional CSV of beta values per coupling strength.")
@click.pass_context
def sweep_g(ctx, g_list, runs, horizon, seed, mode, lam, eta, rho, p0, out, beta_out):
    """AMSE of the benchmark model across coupling strengths."""
    try:
        values = [float(v) for v in g_list.split(",") if v.strip()]
    except ValueError:
        click.echo(f"error (config): cannot parse --g list {g_list!r}", err=True)
        sys.exit(EXIT_CONFIG)
    if not values:
        click.echo("error (config): --g list is empty", err=True)
        sys.exit(EXIT_CONFIG)
    doc = _post(ctx, "/sweep-g", {
        "g": values, "runs": runs, "horizon": horizon, "seed": seed,
        "mode": mode, "lambda": lam, "eta": eta, "rho": rho, "p0": p0,
    })
    rows = [(repr(r["g"]), repr(r["amse"])) for r in doc["rows"]]
    if out:
        _write_rows(out, ["g", "amse"], rows)
    else:
        click.echo("g,amse")
        for row in rows:
            click.echo(",".join(row))
    if beta_out:
        _write_rows(beta_out, ["g", "subsystem", "beta"], [
            (repr(r["g"]), i + 1, repr(b))
            for r in doc["rows"]
            for i, b in enumerate(r["beta"])
        ])


if __name__ == "__main__":
    main()

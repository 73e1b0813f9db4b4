use std::path::Path;

use clap::Parser;
use filmrelax_cli::config::parse;
use filmrelax_cli::{run, thread_cap, Args};
use serde_json::Value;

fn invoke(cmd: &str, config: &str, dir: &Path, extra: &[&str]) -> (i32, Value) {
    let cfg = dir.join(format!("{cmd}.toml"));
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    let mut argv = vec!["filmrelax", cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    argv.extend_from_slice(extra);
    let code = run(&Args::parse_from(argv));
    let report = std::fs::read_to_string(out.join(format!("{cmd}.json")))
        .map(|t| serde_json::from_str(&t).unwrap())
        .unwrap_or(Value::Null);
    (code, report)
}

fn result(report: &Value) -> &Value {
    &report["body"]["result"]
}

#[test]
fn density_of_squared_norm_at_unit_stretch() {
    let dir = tempfile::tempdir().unwrap();
    let (code, r) = invoke("density", "[cell]\ncells = 4\n", dir.path(), &[]);
    assert_eq!(code, 0);
    let v = result(&r)["value"].as_f64().unwrap();
    assert!((v - 1.0).abs() <= 1e-4);
    assert_eq!(r["body"]["status"], "ok");
}

#[test]
fn narrow_l_range_is_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[integrand]\npreset = \"shifted-quadratic\"\n[cell]\ncells = 3\n[cell.l_search]\nl_min = 0.01\nl_max = 0.1\n";
    let (code, r) = invoke("density", cfg, dir.path(), &[]);
    assert_eq!(code, 2);
    assert_eq!(r["body"]["status"], "warning");
    assert!(r["body"]["warnings"][0].as_str().unwrap().contains("end of the search range"));
}

#[test]
fn malformed_keys_are_named() {
    let e = parse("[cell]\ncels = 4\n").unwrap_err();
    assert_eq!(e.config_key(), Some("cell.cels"));
    assert!(e.to_string().contains("cell.cels"));
    let e = parse("[gamma]\nepsilons = [1.0, \"half\"]\n").unwrap_err();
    assert!(e.config_key().unwrap().starts_with("gamma.epsilons"));
    let e = parse("[integrand.base]\nfamily = \"p-norm\"\np = 2.0\nmodulus = 1.0\nmu = 3.0\n").unwrap_err();
    assert!(e.to_string().contains("mu"), "{e}");

    let dir = tempfile::tempdir().unwrap();
    let (code, r) = invoke("density", "[cell]\ncels = 4\n", dir.path(), &[]);
    assert_eq!(code, 1);
    assert!(r.is_null(), "no report without a config");
}

#[test]
fn solver_errors_exit_one_with_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let (code, r) = invoke("density", "[cell]\ncells = 2\ntol = -1.0\n", dir.path(), &[]);
    assert_eq!(code, 1);
    assert_eq!(r["body"]["status"], "error");
}

#[test]
fn defaults_are_echoed_in_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let (_, r) = invoke("density", "[cell]\ncells = 2\n", dir.path(), &["--seed", "11"]);
    let p = &r["body"]["provenance"];
    assert_eq!(p["seed"], 11);
    assert_eq!(p["config"]["seed"], 11);
    assert_eq!(p["config"]["cell"]["tol"], 1e-4);
    assert_eq!(p["config"]["cell"]["l_search"]["grid_count"], 17);
    assert_eq!(p["config"]["gamma"]["epsilons"].as_array().unwrap().len(), 4);
    assert_eq!(p["integrand"]["growth"]["beta_lower"], 1.0);
    assert_eq!(p["integrand_hash"].as_str().unwrap().len(), 64);
    assert!(p["config"]["output"].get("dir").is_none());
}

#[test]
fn cosserat_at_zero_matches_density() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[integrand]\npreset = \"laminate\"\n[cell]\ncells = 4\nf_bar = [[1.0, 0.2], [-0.3, 0.8], [0.5, 0.1]]\n";
    let (c1, d) = invoke("density", cfg, dir.path(), &[]);
    let (c2, c) = invoke("cosserat", cfg, dir.path(), &[]);
    assert_eq!((c1, c2), (0, 0));
    let (a, b) = (result(&d)["value"].as_f64().unwrap(), result(&c)["value"].as_f64().unwrap());
    // the laminate's transverse minimizer is z = 0; slice-wise mean of a is 2
    let exact = 2.0 * (1.0f64 + 0.04 + 0.09 + 0.64 + 0.25 + 0.01);
    assert!((a - b).abs() <= 2e-4 * a.max(b));
    assert!((a - exact).abs() <= 1e-4 * exact);
}

#[test]
fn qcx_relaxes_the_two_well_midpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (code, r) = invoke("qcx", "[integrand]\npreset = \"two-well\"\n", dir.path(), &[]);
    assert_eq!(code, 0);
    let res = result(&r);
    assert!(res["value"].as_f64().unwrap() <= 1e-3);
    assert!(res["unrelaxed"].as_f64().unwrap() > 0.1);
}

#[test]
fn gamma_on_a_homogeneous_convex_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[gamma]\ncells = [4, 4]\ntransverse_cells = 4\nf_bc = [[1.1, 0.2], [0.0, 0.9], [0.3, -0.1]]\n";
    let (code, r) = invoke("gamma", cfg, dir.path(), &["--export", "csv"]);
    assert_eq!(code, 0);
    let res = result(&r);
    let rows = res["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for row in rows {
        assert!(row["gap"].as_f64().unwrap().abs() <= 1e-4, "{row}");
    }
    // 2·area·|F̄|² with |F̄|² = 1.21 + 0.04 + 0.81 + 0.09 + 0.01
    let limit = res["limit_energy"].as_f64().unwrap();
    assert!((limit - 2.0 * 2.16).abs() <= 1e-6 * limit);
    let csv = std::fs::read_to_string(dir.path().join("out/convergence.csv")).unwrap();
    assert!(csv.starts_with("epsilon,energy,gap,iterations,seconds"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn table_source_reproduces_the_cell_source() {
    let dir = tempfile::tempdir().unwrap();
    // every F̄ entry gets an axis through the boundary value, so the limit
    // solver stays on the grid while it searches
    let mut axes = String::new();
    let f_bc = [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
    for (r, row) in f_bc.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let mut dir = [[0.0; 2]; 3];
            dir[r][c] = 1.0;
            axes += &format!(
                "[[tabulate.grid.axes]]\nf_dir = {dir:?}\nmin = {}\nmax = {}\ncount = 3\n",
                v - 0.5,
                v + 0.5
            );
        }
    }
    let cfg = format!(
        "[cell]\ncells = 2\n[tabulate]\ncells = 2\n[tabulate.grid]\nf_base = [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]\n\
         [tabulate.grid.x]\nkind = \"frozen\"\nx_alpha = [0.5, 0.5]\n{axes}\
         [gamma]\ncells = [3, 3]\ntransverse_cells = 2\nepsilons = [0.5]\nsource_cells = 2\n"
    );
    let (code, t) = invoke("tabulate", &cfg, dir.path(), &[]);
    assert_eq!(code, 0, "{t}");
    assert_eq!(result(&t)["nodes"], 729);
    assert_eq!(result(&t)["invalid"], 0);
    assert!(!dir.path().join("out/density.table.checkpoint").exists());

    let (c1, direct) = invoke("gamma", &cfg, dir.path(), &[]);
    let (c2, tabled) = invoke("gamma", &format!("{cfg}source = \"table\"\n"), dir.path(), &[]);
    assert_eq!((c1, c2), (0, 0));
    let a = result(&direct)["limit_energy"].as_f64().unwrap();
    let b = result(&tabled)["limit_energy"].as_f64().unwrap();
    assert!((a - 4.0).abs() <= 1e-6, "{a}");
    assert!((a - b).abs() <= 1e-3 * a, "{a} vs {b}");
}

#[test]
fn table_for_another_integrand_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let base = "[cell]\ncells = 2\n[tabulate]\ncells = 2\n";
    let (code, _) = invoke("tabulate", base, dir.path(), &[]);
    assert_eq!(code, 0);
    let cfg = format!("{base}[integrand]\npreset = \"laminate\"\n[gamma]\nsource = \"table\"\ncells = [2, 2]\ntransverse_cells = 2\n");
    let (code, r) = invoke("gamma", &cfg, dir.path(), &[]);
    assert_eq!(code, 1);
    assert!(r["body"]["warnings"][0].as_str().unwrap().contains("built for integrand"));
}

#[test]
fn wrong_coercivity_constant_fails_the_growth_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[integrand.growth]\np = 2.0\nbeta_lower = 5.0\nbeta_upper = 10.0\n[check]\nchecks = [\"growth\"]\n";
    let (code, r) = invoke("check", cfg, dir.path(), &[]);
    assert_eq!(code, 1);
    let checks = result(&r)["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 1);
    assert_eq!(checks[0]["name"], "growth");
    assert_eq!(checks[0]["passed"], false);
}

#[test]
fn empty_check_list_passes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, r) = invoke("check", "[check]\nchecks = []\n", dir.path(), &["--export", "csv"]);
    assert_eq!(code, 0);
    assert_eq!(result(&r)["checks"].as_array().unwrap().len(), 0);
    let csv = std::fs::read_to_string(dir.path().join("out/check.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn default_checks_pass_and_repeat_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, ra) = invoke("check", "seed = 5\n", a.path(), &["--threads", "1"]);
    let (cb, rb) = invoke("check", "seed = 5\n", b.path(), &["--threads", "2"]);
    assert_eq!((ca, cb), (0, 0));
    assert_eq!(ra["body_sha256"], rb["body_sha256"]);
    assert_eq!(ra["body"], rb["body"]);
    assert_ne!(ra["runtime"]["out_dir"], rb["runtime"]["out_dir"]);
}

#[test]
fn seed_changes_the_samples() {
    let a = tempfile::tempdir().unwrap();
    let cfg = "[check]\nchecks = [\"stress-fd\"]\n";
    let (_, r1) = invoke("check", cfg, a.path(), &["--seed", "1"]);
    let (_, r2) = invoke("check", cfg, a.path(), &["--seed", "2"]);
    assert_ne!(result(&r1)["checks"][0]["worst"], result(&r2)["checks"][0]["worst"]);
}

#[test]
fn environment_overrides_the_thread_flag() {
    assert_eq!(thread_cap(Some(4), None), Some(4));
    assert_eq!(thread_cap(Some(4), Some("2")), Some(2));
    assert_eq!(thread_cap(None, Some(" 3 ")), Some(3));
    assert_eq!(thread_cap(Some(4), Some("many")), Some(4));
    assert_eq!(thread_cap(Some(0), None), None);
}

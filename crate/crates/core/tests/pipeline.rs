use std::collections::BTreeSet;
use std::fs;
use std::process::Command;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ura_core::analysis::{binomial_pmf, poisson_pmf};
use ura_core::channel::complex_gaussian;
use ura_core::codebook::PilotCodebook;
use ura_core::config::SystemConfig;
use ura_core::detector::{cbml_detect, CbmlOptions};
use ura_core::harness::{run_experiment, to_csv, ExperimentSpec, SweepVariable};

#[test]
fn two_pilots_recovered_at_ten_db() {
    let cfg = SystemConfig::table_one();
    let cb = PilotCodebook::build(cfg.pilot_bits, cfg.pilot_len, cfg.seed).unwrap();
    let sigma2 = 0.1;
    let opts = CbmlOptions::new(cfg.detector_passes, cfg.activity_threshold);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let trials = 200;
    let mut hits = 0;
    for _ in 0..trials {
        let a = rng.random_range(0..cb.n_pilots());
        let b = loop {
            let b = rng.random_range(0..cb.n_pilots());
            if b != a {
                break b;
            }
        };
        let mut y = DMatrix::from_fn(cfg.antennas, cfg.pilot_len, |_, _| complex_gaussian(&mut rng, sigma2));
        for p in [a, b] {
            let g: Vec<_> = (0..cfg.antennas).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
            for (j, s) in cb.column(p).iter().enumerate() {
                for (i, gi) in g.iter().enumerate() {
                    y[(i, j)] += gi * *s;
                }
            }
        }
        let out = cbml_detect(&y.as_view(), &cb, sigma2, &opts).unwrap();
        let truth: BTreeSet<usize> = [a, b].into();
        hits += usize::from(out.active.iter().copied().collect::<BTreeSet<_>>() == truth);
    }
    assert!(hits as f64 / trials as f64 >= 0.99, "{hits}/{trials}");
}

#[test]
fn poisson_degree_approximation_gap() {
    // total variation between Binomial(N_a, K/N_slot) and its Poisson limit
    let p = 2.0 / 33.0;
    let na = 100;
    let lambda = na as f64 * p;
    let head: f64 = (0..=na).map(|j| (binomial_pmf(na, p, j) - poisson_pmf(lambda, j)).abs()).sum();
    let tail = 1.0 - (0..=na).map(|j| poisson_pmf(lambda, j)).sum::<f64>();
    let tv = 0.5 * (head + tail);
    // independent value, summed with exact factorial ratios in f64
    let mut oracle = 0.0;
    let (mut b, mut q) = ((1.0 - p).powi(na as i32), (-lambda).exp());
    for j in 0..=na {
        oracle += (b - q).abs();
        b *= (na - j) as f64 / (j + 1) as f64 * p / (1.0 - p);
        q *= lambda / (j + 1) as f64;
    }
    oracle = 0.5 * (oracle + tail);
    assert!((tv - oracle).abs() < 1e-12);
    assert!((0.0145..0.0155).contains(&tv), "{tv}");
}

#[test]
fn noiseless_small_loads_decode() {
    let cfg = SystemConfig::table_one().with_snr_db(40.0);
    let spec = ExperimentSpec::new(SweepVariable::ActiveUsers, vec![10.0, 20.0, 30.0], 10, 3);
    for row in run_experiment(&spec, &cfg).unwrap() {
        assert!(row.fer <= 0.01, "{row:?}");
        assert_eq!(row.false_rate, 0.0);
    }
}

#[test]
fn experiment_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SystemConfig::table_one();
    let mut outputs = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let mut spec = ExperimentSpec::new(SweepVariable::SnrDb, vec![-3.0, 0.0], 6, 77);
        spec.output = Some(dir.path().join(name));
        let rows = run_experiment(&spec, &cfg.with_active_users(25)).unwrap();
        let written = fs::read(dir.path().join(name)).unwrap();
        assert_eq!(written, to_csv(spec.variable, &rows).into_bytes());
        outputs.push(written);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn thirty_users_at_zero_db() {
    let cfg = SystemConfig::table_one();
    let spec = ExperimentSpec::new(SweepVariable::ActiveUsers, vec![30.0], 200, 30);
    let row = run_experiment(&spec, &cfg).unwrap().remove(0);
    assert!(row.fer < 0.05, "{row:?}");
}

#[test]
fn channel_error_falls_with_snr() {
    let cfg = SystemConfig::table_one().with_active_users(16);
    let mut spec = ExperimentSpec::new(SweepVariable::SnrDb, vec![-5.0, -2.5, 0.0], 100, 16);
    spec.sic = false;
    let rows = run_experiment(&spec, &cfg).unwrap();
    assert!(rows.windows(2).all(|w| w[1].nse_db < w[0].nse_db), "{rows:?}");
    // single-stage estimates sit near 1e-2
    assert!(rows[2].nse_db < -15.0 && rows[2].nse_db > -30.0, "{rows:?}");
}

fn ura(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ura")).args(args).output().unwrap()
}

#[test]
fn cli_threshold_and_coherence() {
    let out = ura(&["threshold", "--K", "2", "--M", "4", "--Nslot", "33"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "3.39");
    let out = ura(&["coherence", "--v", "3"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "22500");
    let out = ura(&["coherence", "--v", "30"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "2250");
}

#[test]
fn cli_exit_codes() {
    let out = ura(&["threshold", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "pilot_len = 99999999\n").unwrap();
    let out = ura(&["sim", "--config", bad.to_str().unwrap(), "--trials", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_sim_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(&cfg, SystemConfig::table_one().with_active_users(5).to_config_string()).unwrap();
    let csv = dir.path().join("out.csv");
    let out = ura(&[
        "sim", "--config", cfg.to_str().unwrap(), "--trials", "2", "--decoder", "ml", "--out", csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("active_users,trials,fer,"));
    assert_eq!(text.lines().count(), 2);

    let de = ura(&["analyze-de", "--r-min", "1", "--r-max", "2", "--r-step", "0.5"]);
    let de = String::from_utf8_lossy(&de.stdout).to_string();
    assert!(de.starts_with("r,Z_final,T_r"));
    assert_eq!(de.lines().count(), 4);
    let gamma = ura(&["analyze-gamma", "--Na", "130", "--t-max", "5"]);
    assert_eq!(String::from_utf8_lossy(&gamma.stdout).lines().count(), 6);
    let cx = ura(&["complexity", "--rates", "0"]);
    assert!(String::from_utf8_lossy(&cx.stdout).contains("0,2.860155e8,0.000000e0"));
}

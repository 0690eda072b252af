//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-10 are training-free; 11-16 come from the desk-scale study
//! (shared teacher, three distillation seeds, medians). The process exits 0
//! unless `ACCEPTANCE_STRICT=1`; `ACCEPTANCE_SKIP_E2E=1` skips 11-16.

use std::process::ExitCode;
use std::time::Instant;

use vidistill::study::{self, median, SeedMetrics};
use vidistill::verify::{self, Check, OracleSettings};

const SEEDS: [u64; 3] = [1, 2, 3];
const FEATURE_RATIO_MAX: f64 = 0.5;
const BUDGET_SECONDS: f64 = 3600.0;

fn flag(name: &str) -> bool {
    std::env::var(name).map(|v| v == "1").unwrap_or(false)
}

fn line(id: u8, name: &'static str, passed: bool, detail: String) -> Check {
    let c = Check { id, name, passed, detail };
    println!("{c}");
    c
}

fn directional(rows: &[SeedMetrics]) -> Vec<Check> {
    let med = |f: fn(&SeedMetrics) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
    let full_tts = med(|m| m.fvd_full_tts);
    let full_cm = med(|m| m.fvd_full_cm);
    let cfg15 = med(|m| m.fvd_full_cfg15);
    let cfg30 = med(|m| m.fvd_full_cfg30);
    let no_adv = med(|m| m.fvd_no_adv_tts);
    let s2_only = med(|m| m.fvd_stage2_only_tts);
    let r1 = med(|m| m.feature_ratio_stage1);
    let r2 = med(|m| m.feature_ratio_stage2);
    let gap_before = med(|m| m.gap_before);
    let gap_after = med(|m| m.gap_after);
    let gap_no_adv = med(|m| m.gap_no_adv);
    let gap_s2_only = med(|m| m.gap_stage2_only);
    vec![
        line(
            11,
            "adversarial term helps",
            full_tts < no_adv,
            format!("median toy-FVD 1-step TTS: adversarial {full_tts:.4} < consistency-only {no_adv:.4}"),
        ),
        line(
            12,
            "stage 1 helps",
            full_tts <= s2_only,
            format!("median toy-FVD 1-step TTS: stage1+stage2 {full_tts:.4} <= stage2-only {s2_only:.4}"),
        ),
        line(
            13,
            "time-travel sampler helps at one step",
            full_tts < full_cm,
            format!("median toy-FVD same checkpoint: TTS {full_tts:.4} < plain {full_cm:.4}"),
        ),
        line(
            14,
            "guidance at inference hurts the student",
            full_cm <= cfg15 && cfg15 <= cfg30,
            format!("median toy-FVD 1-step: none {full_cm:.4} <= w=1.5 {cfg15:.4} <= w=3.0 {cfg30:.4}"),
        ),
        line(
            15,
            "stage-2 predictions track targets",
            r2 < FEATURE_RATIO_MAX && r2 < r1,
            format!("median feature MSE ratio: stage 2 {r2:.4} < {FEATURE_RATIO_MAX} and < stage 1 {r1:.4}"),
        ),
        line(
            16,
            "stage 2 reduces the self-consistency gap",
            gap_after < gap_before,
            format!(
                "median gap: after stage 2 {gap_after:.5} < before {gap_before:.5} \
                 (for reference: no-adversarial {gap_no_adv:.5}, stage2-only {gap_s2_only:.5})"
            ),
        ),
    ]
}

fn main() -> ExitCode {
    let start = Instant::now();
    println!("acceptance: exact checks");
    let mut checks = Vec::new();
    for c in verify::exact_checks() {
        println!("{c}");
        checks.push(c);
    }
    println!("acceptance: oracle checks ({:.1}s so far)", start.elapsed().as_secs_f64());
    for c in verify::oracle_checks(&OracleSettings::default()) {
        println!("{c}");
        checks.push(c);
    }
    println!("acceptance: training-free part took {:.1}s", start.elapsed().as_secs_f64());

    if flag("ACCEPTANCE_SKIP_E2E") {
        println!("[SKIP] 11-16 end-to-end study (ACCEPTANCE_SKIP_E2E=1)");
    } else {
        let e2e = Instant::now();
        let cfg = study::desk_config();
        match study::prepare(cfg) {
            Err(e) => {
                for id in 11..=16 {
                    checks.push(line(id, "end-to-end study", false, format!("shared setup failed: {e}")));
                }
            }
            Ok(shared) => {
                println!(
                    "study: teacher and backbone in {:.0}s; backbone accuracy {:.3}; teacher toy-FVD {:.4}",
                    shared.seconds, shared.backbone_accuracy, shared.teacher_fvd
                );
                let mut rows = Vec::new();
                for seed in SEEDS {
                    match study::run_seed(&shared, seed) {
                        Ok(m) => {
                            println!("study: {}", toml::to_string(&m).unwrap_or_default().replace('\n', "; "));
                            rows.push(m);
                        }
                        Err(e) => println!("study: seed {seed} failed: {e}"),
                    }
                }
                if rows.len() == SEEDS.len() {
                    checks.extend(directional(&rows));
                } else {
                    for id in 11..=16 {
                        checks.push(line(id, "end-to-end study", false, "a seed failed".into()));
                    }
                }
            }
        }
        let secs = e2e.elapsed().as_secs_f64();
        let verdict = if secs <= BUDGET_SECONDS { "within" } else { "OVER" };
        println!("study: end-to-end part took {secs:.0}s ({verdict} the {BUDGET_SECONDS:.0}s budget)");
    }

    let failed = checks.iter().filter(|c| !c.passed).count();
    println!(
        "acceptance: {} passed, {failed} failed, total {:.0}s",
        checks.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 && flag("ACCEPTANCE_STRICT") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

//! Ablation grid runner: one model per (cell, seed), trained on shared data,
//! summarised as mean ± std word accuracy.

use std::fmt::Write as _;
use std::sync::Mutex;

use crate::config::{Config, FeVariant, MaskMode, SesMode};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::training::Trainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub fe: FeVariant,
    pub ses: SesMode,
    pub mask: MaskMode,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("fe={} ses={} mask={}", self.fe, self.ses, self.mask)
    }

    pub fn apply(&self, base: &Config, seed: u64) -> Config {
        let mut c = base.clone();
        c.model.fe_variant = self.fe;
        c.model.ses_mode = self.ses;
        c.model.mask_mode = self.mask;
        c.train.seed = seed;
        c
    }
}

/// Enhancement variants, SES modes and masking targets, each varied around
/// `fe=multimodal ses=ses` with masking off except on the masking axis.
pub fn full_grid() -> Vec<Cell> {
    let mut cells = Vec::new();
    let mut push = |c: Cell| {
        if !cells.contains(&c) {
            cells.push(c);
        }
    };
    for &fe in FeVariant::ALL {
        push(Cell { fe, ses: SesMode::Ses, mask: MaskMode::None });
    }
    for &ses in SesMode::ALL {
        push(Cell { fe: FeVariant::Multimodal, ses, mask: MaskMode::None });
    }
    for &mask in MaskMode::ALL {
        push(Cell { fe: FeVariant::Multimodal, ses: SesMode::Ses, mask });
    }
    cells
}

/// The enhancement axis plus visual-clue masking on the multimodal model.
pub fn trend_grid() -> Vec<Cell> {
    let mut cells: Vec<Cell> =
        FeVariant::ALL.iter().map(|&fe| Cell { fe, ses: SesMode::Ses, mask: MaskMode::None }).collect();
    cells.push(Cell { fe: FeVariant::Multimodal, ses: SesMode::Ses, mask: MaskMode::VisualClue });
    cells
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    /// Final validation accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
}

impl CellResult {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Sample standard deviation (0 for a single seed).
    pub fn std(&self) -> f64 {
        let n = self.accuracies.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.accuracies.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub cells: Vec<CellResult>,
}

impl AblationReport {
    pub fn find(&self, fe: FeVariant, ses: SesMode, mask: MaskMode) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell == Cell { fe, ses, mask })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:<14} {:<14} {:>8} {:>7}  per-seed", "fe", "ses", "mask", "mean%", "std");
        for c in &self.cells {
            let seeds: Vec<String> = c.accuracies.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
            let _ = writeln!(
                s,
                "{:<14} {:<14} {:<14} {:>8.2} {:>7.2}  {}",
                c.cell.fe.as_str(),
                c.cell.ses.as_str(),
                c.cell.mask.as_str(),
                100.0 * c.mean(),
                100.0 * c.std(),
                seeds.join(" ")
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fe,ses,mask,seeds,mean,std\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6}",
                c.cell.fe,
                c.cell.ses,
                c.cell.mask,
                c.accuracies.len(),
                c.mean(),
                c.std()
            );
        }
        s
    }
}

/// Trains every (cell, seed) pair on `data` with up to `threads` workers.
/// Each job derives all randomness from its own seed, so the result does not
/// depend on scheduling.
pub fn run_ablation(base: &Config, cells: &[Cell], seeds: &[u64], data: &Split, threads: usize) -> Result<AblationReport> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one cell and one seed".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..seeds.len()).map(move |s| (c, s))).collect();
    let results: Mutex<Vec<Option<Result<f64>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    let run = |(c, s): (usize, usize)| -> Result<f64> {
        let cfg = cells[c].apply(base, seeds[s]);
        cfg.validate()?;
        let mut trainer = Trainer::<f32>::new(&cfg.model, &cfg.train)?;
        trainer.fit(&data.train, &data.val, |_| {})?;
        let acc = crate::training::evaluate(&trainer.model, &data.val, 64)?.accuracy;
        log::info!("{} seed {}: {:.2}%", cells[c].name(), seeds[s], 100.0 * acc);
        Ok(acc)
    };
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let j = {
                    let mut n = next.lock().expect("job counter");
                    let j = *n;
                    *n += 1;
                    j
                };
                let Some(&job) = jobs.get(j) else { break };
                let r = run(job);
                results.lock().expect("results")[j] = Some(r);
            });
        }
    });
    let mut flat = results.into_inner().expect("results").into_iter();
    let mut out = Vec::with_capacity(cells.len());
    for &cell in cells {
        let mut accuracies = Vec::with_capacity(seeds.len());
        for _ in seeds {
            accuracies.push(flat.next().flatten().expect("every job ran")?);
        }
        out.push(CellResult { cell, accuracies });
    }
    Ok(AblationReport { cells: out })
}

//! Synthetic dataset generator.
//!
//! Each category has an hour-of-day and weekday visit signature and an image
//! tint. Users belong to one to three "home" categories and mostly visit
//! regions of those categories, which is the structure the activity and
//! region graph features pick up. Individual regions blend their category's
//! signature with a random other category's, so the temporal signal alone is
//! ambiguous, and tints are small relative to per-image jitter, so the image
//! signal is weak.
//!
//! `noise` in `[0, 1]` interpolates every signal toward uniform: signatures
//! toward flat profiles, visitors toward uniformly random users, tints toward
//! neutral gray. At `noise = 1` labels are independent of the data.
//!
//! Output layout under the target directory:
//!
//! ```text
//! manifest.csv        all regions; held-out regions have an empty label
//! test_labels.csv     held-out regions with their labels (manifest format)
//! visits/<id>.txt     visit logs
//! images/<id>.png     100 × 100 RGB tiles
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branches::IMAGE_SIZE;
use crate::error::{Error, Result};
use crate::ingest::{serialize_visit_log, write_manifest};
use crate::model::{CalendarWindow, Category, RegionRecord, Visit, VisitLog, N_CATEGORIES};
use crate::seed::stage_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub regions_per_category: usize,
    pub n_users: usize,
    pub window: CalendarWindow,
    pub noise: f64,
    pub seed: u64,
    /// Fraction of each category held out as unlabeled test regions.
    pub test_fraction: f64,
    pub min_visitors: usize,
    pub max_visitors: usize,
    pub min_events_per_visitor: usize,
    pub max_events_per_visitor: usize,
    /// Upper bound of the per-region blend weight toward another category.
    pub max_blend: f64,
    /// Image tint strength relative to the category colour offset.
    pub tint_strength: f64,
    /// Standard deviation of the per-image colour jitter.
    pub image_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            regions_per_category: 100,
            n_users: 2000,
            window: CalendarWindow::default(),
            noise: 0.3,
            seed: 42,
            test_fraction: 0.2,
            min_visitors: 20,
            max_visitors: 30,
            min_events_per_visitor: 2,
            max_events_per_visitor: 8,
            max_blend: 0.6,
            tint_strength: 1.3,
            image_jitter: 18.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_owned()));
        if self.regions_per_category == 0 {
            return bad("regions_per_category must be at least 1");
        }
        if self.n_users == 0 {
            return bad("n_users must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        if self.min_visitors == 0 || self.min_visitors > self.max_visitors {
            return bad("visitor range must satisfy 1 <= min <= max");
        }
        if self.min_events_per_visitor == 0 || self.min_events_per_visitor > self.max_events_per_visitor {
            return bad("events-per-visitor range must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.max_blend) {
            return bad("max_blend must lie in [0, 1]");
        }
        Ok(())
    }
}

fn bumps(peaks: &[(f64, f64, f64)]) -> [f64; 24] {
    let mut out = [0.05; 24];
    for (h, o) in out.iter_mut().enumerate() {
        for &(centre, width, amp) in peaks {
            let d = h as f64 - centre;
            *o += amp * (-(d * d) / (2.0 * width * width)).exp();
        }
    }
    out
}

/// Hour-of-day signature of each category.
pub fn hour_signature(c: Category) -> [f64; 24] {
    match c {
        Category::Res => bumps(&[(7.5, 1.5, 1.0), (20.0, 2.0, 1.3)]),
        Category::Sch => bumps(&[(8.0, 1.0, 1.2), (12.0, 2.0, 0.8), (16.0, 1.0, 1.0)]),
        Category::Ind => bumps(&[(7.0, 1.0, 1.0), (12.0, 3.0, 1.0), (17.0, 1.0, 0.8)]),
        Category::Rail => bumps(&[(8.0, 1.5, 1.0), (18.0, 1.5, 1.0), (13.0, 4.0, 0.4)]),
        Category::Air => bumps(&[(10.0, 6.0, 1.0), (3.0, 2.0, 0.4), (22.0, 2.0, 0.5)]),
        Category::Park => bumps(&[(10.0, 2.0, 1.0), (16.0, 2.0, 1.0)]),
        Category::Shop => bumps(&[(14.0, 3.0, 1.0), (20.0, 2.0, 1.0)]),
        Category::Adm => bumps(&[(10.0, 2.0, 1.0), (15.0, 2.0, 1.0)]),
        Category::Hos => bumps(&[(10.0, 3.0, 1.0), (15.0, 3.0, 0.8), (2.0, 3.0, 0.2)]),
    }
}

/// Weekday signature (offsets 5 and 6 are the weekend).
pub fn weekday_signature(c: Category) -> [f64; 7] {
    match c {
        Category::Res => [1.0, 1.0, 1.0, 1.0, 1.0, 1.4, 1.4],
        Category::Sch => [1.0, 1.0, 1.0, 1.0, 1.0, 0.15, 0.1],
        Category::Ind => [1.0, 1.0, 1.0, 1.0, 1.0, 0.4, 0.2],
        Category::Rail => [1.0, 1.0, 1.0, 1.0, 1.2, 1.1, 1.1],
        Category::Air => [1.0, 1.0, 1.0, 1.0, 1.1, 1.0, 1.1],
        Category::Park => [0.6, 0.6, 0.6, 0.6, 0.7, 1.6, 1.6],
        Category::Shop => [0.8, 0.8, 0.8, 0.8, 1.0, 1.6, 1.5],
        Category::Adm => [1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1],
        Category::Hos => [1.0, 1.0, 1.0, 1.0, 1.0, 0.7, 0.6],
    }
}

/// Category colour offsets from neutral gray.
pub fn tint(c: Category) -> [f64; 3] {
    match c {
        Category::Res => [40.0, 10.0, -20.0],
        Category::Sch => [30.0, 30.0, -30.0],
        Category::Ind => [-10.0, -10.0, -10.0],
        Category::Rail => [10.0, -20.0, -30.0],
        Category::Air => [-20.0, 0.0, 40.0],
        Category::Park => [-30.0, 50.0, -20.0],
        Category::Shop => [45.0, -10.0, 10.0],
        Category::Adm => [0.0, 15.0, 25.0],
        Category::Hos => [20.0, 20.0, 20.0],
    }
}

fn normalize<const N: usize>(v: [f64; N]) -> [f64; N] {
    let s: f64 = v.iter().sum();
    v.map(|x| x / s)
}

fn blend<const N: usize>(a: [f64; N], b: [f64; N], w: f64) -> [f64; N] {
    let mut out = [0.0; N];
    for i in 0..N {
        out[i] = (1.0 - w) * a[i] + w * b[i];
    }
    out
}

struct RegionPlan {
    id: String,
    category: Category,
    held_out: bool,
}

/// Users' home-category pools.
fn user_pools(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); N_CATEGORIES];
    for u in 0..config.n_users {
        let k = rng.random_range(1..=3);
        let mut cats: Vec<usize> = (0..N_CATEGORIES).collect();
        cats.shuffle(rng);
        for &c in &cats[..k] {
            pools[c].push(u);
        }
    }
    // every category needs at least one member
    for (c, pool) in pools.iter_mut().enumerate() {
        if pool.is_empty() {
            pool.push(c % config.n_users);
        }
    }
    pools
}

fn user_id(u: usize) -> String {
    format!("U{u:05}")
}

fn generate_log(
    plan: &RegionPlan,
    config: &SynthConfig,
    pools: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
) -> Result<VisitLog> {
    let c = plan.category;
    let nu = config.noise;
    let other = loop {
        let o = Category::ALL[rng.random_range(0..N_CATEGORIES)];
        if o != c {
            break o;
        }
    };
    let w = rng.random_range(0.0..=config.max_blend);
    let hours = blend(blend(normalize(hour_signature(c)), normalize(hour_signature(other)), w), [1.0 / 24.0; 24], nu);
    let weekdays =
        blend(blend(normalize(weekday_signature(c)), normalize(weekday_signature(other)), w), [1.0 / 7.0; 7], nu);
    let hour_dist = WeightedIndex::new(hours).map_err(|e| Error::Invalid(e.to_string()))?;
    let weekday_dist = WeightedIndex::new(weekdays).map_err(|e| Error::Invalid(e.to_string()))?;
    let weeks = config.window.num_weeks() as u32;

    let mut log = VisitLog::new(plan.id.clone(), config.window);
    let n_visitors = rng.random_range(config.min_visitors..=config.max_visitors);
    for _ in 0..n_visitors {
        let user = if rng.random_bool(1.0 - nu) {
            *pools[c.index()].choose(rng).expect("non-empty pool")
        } else {
            rng.random_range(0..config.n_users)
        };
        let n_events = rng.random_range(config.min_events_per_visitor..=config.max_events_per_visitor);
        for _ in 0..n_events {
            let day = loop {
                let d = rng.random_range(0..weeks) * 7 + weekday_dist.sample(rng) as u32;
                if d < config.window.num_days {
                    break d;
                }
            };
            log.insert(&user_id(user), Visit::new(day, hour_dist.sample(rng) as u8))?;
        }
    }
    Ok(log)
}

fn generate_image(category: Category, config: &SynthConfig, rng: &mut ChaCha8Rng) -> RgbImage {
    let jitter = Normal::new(0.0, config.image_jitter).expect("valid sigma");
    let block = Normal::new(0.0, 12.0).expect("valid sigma");
    let strength = (1.0 - config.noise) * config.tint_strength;
    let t = tint(category);
    let base: [f64; 3] = std::array::from_fn(|ch| 128.0 + strength * t[ch] + jitter.sample(rng));
    let blocks = 10;
    let cell = IMAGE_SIZE / blocks;
    let offsets: Vec<f64> = (0..blocks * blocks).map(|_| block.sample(rng)).collect();
    let mut img = RgbImage::new(IMAGE_SIZE, IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let off = offsets[((y / cell) * blocks + x / cell) as usize];
            let px: [u8; 3] = std::array::from_fn(|ch| {
                (base[ch] + off + rng.random_range(-20.0..20.0)).round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// Summary of a generated dataset.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub test_labels: PathBuf,
    pub n_regions: usize,
    pub n_test: usize,
}

pub fn synth(config: &SynthConfig, out: &Path) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = stage_rng(config.seed, "synth");
    let pools = user_pools(config, &mut rng);

    let n_per = config.regions_per_category;
    let n_test = (config.test_fraction * n_per as f64).round() as usize;
    let mut categories: Vec<Category> = Category::ALL.iter().flat_map(|&c| std::iter::repeat_n(c, n_per)).collect();
    categories.shuffle(&mut rng);
    let mut plans: Vec<RegionPlan> = categories
        .iter()
        .enumerate()
        .map(|(i, &category)| RegionPlan { id: format!("R{i:05}"), category, held_out: false })
        .collect();
    for c in Category::ALL {
        let mut members: Vec<usize> = (0..plans.len()).filter(|&i| plans[i].category == c).collect();
        members.shuffle(&mut rng);
        for &i in &members[..n_test] {
            plans[i].held_out = true;
        }
    }
    let region_seeds: Vec<u64> = plans.iter().map(|_| rng.random()).collect();

    let visits_dir = out.join("visits");
    let images_dir = out.join("images");
    for d in [&visits_dir, &images_dir] {
        fs::create_dir_all(d).map_err(|e| Error::file(d, e))?;
    }

    plans.par_iter().zip(&region_seeds).try_for_each(|(plan, &seed)| -> Result<()> {
        let mut rng = stage_rng(seed, "region");
        let log = generate_log(plan, config, &pools, &mut rng)?;
        let path = visits_dir.join(format!("{}.txt", plan.id));
        fs::write(&path, serialize_visit_log(&log)).map_err(|e| Error::file(&path, e))?;
        let img = generate_image(plan.category, config, &mut rng);
        let path = images_dir.join(format!("{}.png", plan.id));
        img.save(&path).map_err(|e| Error::file(&path, e))?;
        Ok(())
    })?;

    let record = |p: &RegionPlan, label: Option<Category>| RegionRecord {
        region_id: p.id.clone(),
        label,
        visit_path: PathBuf::from(format!("visits/{}.txt", p.id)),
        image_path: Some(PathBuf::from(format!("images/{}.png", p.id))),
    };
    let manifest: Vec<RegionRecord> =
        plans.iter().map(|p| record(p, if p.held_out { None } else { Some(p.category) })).collect();
    let test: Vec<RegionRecord> = plans.iter().filter(|p| p.held_out).map(|p| record(p, Some(p.category))).collect();
    let manifest_path = out.join("manifest.csv");
    let test_path = out.join("test_labels.csv");
    write_manifest(&manifest_path, &manifest)?;
    write_manifest(&test_path, &test)?;
    Ok(SynthOutput {
        root: out.to_owned(),
        manifest: manifest_path,
        test_labels: test_path,
        n_regions: plans.len(),
        n_test: test.len(),
    })
}

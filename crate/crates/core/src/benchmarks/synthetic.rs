use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{write_if_changed, BenchmarkSpec, EvalType, TaskManifest};
use crate::backbone::MultimodalSample;
use crate::error::{Error, Result};
use crate::linalg::orthonormalize;
use crate::scalar::dot;

/// Parameters of the generated task stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_tasks: usize,
    pub samples_per_task_train: usize,
    pub samples_per_task_test: usize,
    pub feature_dim: usize,
    /// Answers per task; answer sets of different tasks are disjoint.
    pub answer_space_size: usize,
    /// Pairwise angle between task mean directions, in degrees.
    pub task_separation: f64,
    /// Norm of the task mean.
    pub mean_scale: f64,
    /// Norm of the class offset added to the task mean.
    pub class_scale: f64,
    /// Per-coordinate standard deviation of the feature noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_tasks: 6,
            samples_per_task_train: 200,
            samples_per_task_test: 50,
            feature_dim: 32,
            answer_space_size: 4,
            task_separation: 60.0,
            mean_scale: 3.0,
            class_scale: 2.0,
            noise: 0.3,
        }
    }
}

const TASK_NAMES: [&str; 10] =
    ["shapes", "colors", "textures", "scenes", "symbols", "counts", "glyphs", "weather", "objects", "layouts"];

const TEMPLATES: [[&str; 3]; 10] = [
    ["what shape is it?", "name the shape", "which shape?"],
    ["what color is it?", "name the color", "which hue?"],
    ["what texture?", "name the texture", "surface kind?"],
    ["what scene?", "name the place", "where is this?"],
    ["which symbol?", "read the sign", "name the mark"],
    ["how many?", "count them", "what number?"],
    ["which glyph?", "read the glyph", "name the rune"],
    ["what weather?", "sky condition?", "name the season"],
    ["what object?", "name the item", "which thing?"],
    ["what layout?", "name the grid", "which pattern?"],
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &'static str, reason: String| Err(Error::InvalidConfig { field, reason });
        if self.num_tasks == 0 {
            return invalid("synthetic.num_tasks", "must be at least 1".into());
        }
        if self.answer_space_size == 0 {
            return invalid("synthetic.answer_space_size", "must be at least 1".into());
        }
        let needed = self.num_tasks + 1 + self.answer_space_size;
        if self.feature_dim < needed {
            return invalid("synthetic.feature_dim", format!("needs at least num_tasks + answer_space_size + 1 = {needed}"));
        }
        if !(self.task_separation > 0.0 && self.task_separation <= 90.0) {
            return invalid("synthetic.task_separation", format!("{} is outside (0, 90] degrees", self.task_separation));
        }
        if self.noise < 0.0 || self.mean_scale <= 0.0 || self.class_scale <= 0.0 {
            return invalid("synthetic.noise", "scales must be positive and noise nonnegative".into());
        }
        Ok(())
    }

    pub fn task_name(&self, t: usize) -> String {
        TASK_NAMES.get(t).map(|s| s.to_string()).unwrap_or_else(|| format!("task{t}"))
    }

    /// The answer string of class `k` in task `t`.
    pub fn answer(&self, t: usize, k: usize) -> String {
        let j = t * self.answer_space_size + k;
        if self.num_tasks * self.answer_space_size <= 26 {
            ((b'a' + j as u8) as char).to_string()
        } else {
            format!("t{t}k{k}")
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Orthonormal vectors orthogonal to `base`, drawn at random.
fn fresh_directions(rng: &mut ChaCha8Rng, base: &[Vec<f64>], count: usize, dim: usize) -> Vec<Vec<f64>> {
    loop {
        let mut all = base.to_vec();
        all.extend((0..count).map(|_| gaussian(rng, dim)));
        let ortho = orthonormalize(&all, 1e-8);
        if ortho.len() == base.len() + count {
            return ortho[base.len()..].to_vec();
        }
    }
}

fn to_jsonl(samples: &[MultimodalSample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes the stream under `out_dir` and returns its spec. Identical specs
/// produce byte-identical files.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<BenchmarkSpec> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.feature_dim;
    let basis = fresh_directions(&mut rng, &[], spec.num_tasks + 1, dim);
    let shared_weight = spec.task_separation.to_radians().cos().sqrt();
    let own_weight = (1.0 - shared_weight * shared_weight).sqrt();
    let means: Vec<Vec<f64>> = (0..spec.num_tasks)
        .map(|t| (0..dim).map(|i| shared_weight * basis[0][i] + own_weight * basis[t + 1][i]).collect())
        .collect();

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    let mut doc = String::from("# Generated synthetic task stream; paths are relative to this directory.\n");
    for (t, mean) in means.iter().enumerate() {
        let classes = fresh_directions(&mut rng, &basis, spec.answer_space_size, dim);
        let name = spec.task_name(t);
        let templates = &TEMPLATES[t % TEMPLATES.len()];
        let mut make = |split: &str, n: usize| -> Vec<MultimodalSample> {
            (0..n)
                .map(|i| {
                    let class = rng.random_range(0..spec.answer_space_size);
                    let noise = gaussian(&mut rng, dim);
                    let x: Vec<f64> = (0..dim)
                        .map(|j| spec.mean_scale * mean[j] + spec.class_scale * classes[class][j] + spec.noise * noise[j])
                        .collect();
                    let scores: Vec<f64> = classes.iter().map(|u| dot(&x, u)).collect();
                    let label = crate::scalar::argmax(&scores).expect("nonempty answer space");
                    let instruction = templates[rng.random_range(0..templates.len())];
                    MultimodalSample::with_image(
                        &format!("{name}-{split}-{i:04}"),
                        x,
                        instruction,
                        &spec.answer(t, label),
                        &name,
                    )
                })
                .collect()
        };
        let train = make("train", spec.samples_per_task_train);
        let test = make("test", spec.samples_per_task_test);
        let dir = format!("task_{t}_{name}");
        write_if_changed(&out_dir.join(&dir).join("train.jsonl"), to_jsonl(&train)?.as_bytes())?;
        write_if_changed(&out_dir.join(&dir).join("test.jsonl"), to_jsonl(&test)?.as_bytes())?;
        let manifest = TaskManifest {
            task_name: name.clone(),
            order_index: t,
            train_path: format!("{dir}/train.jsonl").into(),
            test_path: format!("{dir}/test.jsonl").into(),
            eval_type: EvalType::Exact,
            prompt_template: "{instruction}".into(),
            num_train: Some(train.len()),
            num_test: Some(test.len()),
        };
        let _ = writeln!(doc, "\n[[tasks]]\n{}", toml::to_string(&manifest).map_err(|e| Error::Internal(e.to_string()))?);
        tasks.push(TaskManifest {
            train_path: out_dir.join(&manifest.train_path),
            test_path: out_dir.join(&manifest.test_path),
            ..manifest
        });
    }
    write_if_changed(&out_dir.join("manifest.toml"), doc.as_bytes())?;
    BenchmarkSpec::new("synthetic", tasks, &out_dir.join("manifest.toml"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> SyntheticSpec {
        SyntheticSpec { num_tasks: 3, samples_per_task_train: 30, samples_per_task_test: 10, ..Default::default() }
    }

    #[test]
    fn same_spec_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = generate_synthetic(&small(), a.path()).unwrap();
        let sb = generate_synthetic(&small(), b.path()).unwrap();
        for (ta, tb) in sa.tasks.iter().zip(&sb.tasks) {
            assert_eq!(std::fs::read(&ta.train_path).unwrap(), std::fs::read(&tb.train_path).unwrap());
            assert_eq!(std::fs::read(&ta.test_path).unwrap(), std::fs::read(&tb.test_path).unwrap());
        }
        assert_eq!(
            std::fs::read(a.path().join("manifest.toml")).unwrap(),
            std::fs::read(b.path().join("manifest.toml")).unwrap()
        );
        let reparsed = super::super::parse_manifest("synthetic", &a.path().join("manifest.toml"), a.path()).unwrap();
        assert_eq!(reparsed, sa);
    }

    #[test]
    fn answer_spaces_are_disjoint() {
        let spec = small();
        let sets: Vec<BTreeSet<String>> = (0..3)
            .map(|t| (0..spec.answer_space_size).map(|k| spec.answer(t, k)).collect())
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
    }

    #[test]
    fn rejects_impossible_geometry() {
        let spec = SyntheticSpec { feature_dim: 8, ..Default::default() };
        assert!(matches!(spec.validate(), Err(Error::InvalidConfig { .. })));
        let spec = SyntheticSpec { task_separation: 120.0, ..Default::default() };
        assert!(spec.validate().is_err());
    }
}

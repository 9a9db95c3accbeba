//! Replay buffer of raw interaction and the observation-only demonstration set.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition<T> {
    pub obs: Vec<T>,
    pub action: Vec<T>,
    pub next_obs: Vec<T>,
}

/// `H` contiguous transitions from one episode: `observations.len() == H + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionSequence<T> {
    pub observations: Vec<Vec<T>>,
    pub actions: Vec<Vec<T>>,
}

impl<T> TransitionSequence<T> {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Episode<T> {
    observations: Vec<Vec<T>>,
    actions: Vec<Vec<T>>,
}

/// Append-only, unbounded store of interaction episodes.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer<T> {
    episodes: Vec<Episode<T>>,
    transitions: usize,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new() -> Self {
        Self {
            episodes: Vec::new(),
            transitions: 0,
        }
    }

    pub fn num_transitions(&self) -> usize {
        self.transitions
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Appends one episode. `next_obs[i]` must equal `obs[i + 1]`; the first
    /// violation is reported by index and nothing is stored.
    pub fn push_episode(&mut self, transitions: &[Transition<T>]) -> Result<()> {
        if transitions.is_empty() {
            return Ok(());
        }
        for i in 1..transitions.len() {
            if transitions[i - 1].next_obs != transitions[i].obs {
                return Err(Error::ChainBreak { index: i });
            }
        }
        let mut observations = Vec::with_capacity(transitions.len() + 1);
        let mut actions = Vec::with_capacity(transitions.len());
        for t in transitions {
            observations.push(t.obs.clone());
            actions.push(t.action.clone());
        }
        observations.push(transitions.last().expect("non-empty").next_obs.clone());
        self.transitions += transitions.len();
        self.episodes.push(Episode {
            observations,
            actions,
        });
        Ok(())
    }

    /// Number of valid window starts of length `horizon` across all episodes.
    pub fn num_windows(&self, horizon: usize) -> usize {
        self.episodes
            .iter()
            .map(|e| (e.actions.len() + 1).saturating_sub(horizon))
            .sum()
    }

    /// Samples `batch_size` windows of `horizon` contiguous transitions,
    /// uniformly over all valid start positions.
    pub fn sample_trajectory_batch<R: Rng + ?Sized>(
        &self,
        horizon: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<TransitionSequence<T>>> {
        let total = self.num_windows(horizon);
        if total == 0 || horizon == 0 {
            return Err(Error::InsufficientData(format!(
                "no episode with at least {horizon} transitions; collect more warmup interaction"
            )));
        }
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let mut k = rng.random_range(0..total);
            for e in &self.episodes {
                let n = (e.actions.len() + 1).saturating_sub(horizon);
                if k < n {
                    out.push(TransitionSequence {
                        observations: e.observations[k..=k + horizon].to_vec(),
                        actions: e.actions[k..k + horizon].to_vec(),
                    });
                    break;
                }
                k -= n;
            }
        }
        Ok(out)
    }

    /// Every stored transition, in insertion order.
    pub fn iter_transitions(&self) -> impl Iterator<Item = (&[T], &[T], &[T])> {
        self.episodes.iter().flat_map(|e| {
            (0..e.actions.len()).map(move |i| {
                (
                    e.observations[i].as_slice(),
                    e.actions[i].as_slice(),
                    e.observations[i + 1].as_slice(),
                )
            })
        })
    }
}

/// Observation-only demonstrations with variable episode lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoSet<T> {
    obs_dim: usize,
    episodes: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> DemoSet<T> {
    pub fn new(obs_dim: usize, episodes: Vec<Vec<Vec<T>>>) -> Result<Self> {
        if obs_dim == 0 {
            return Err(Error::Config("demo obs_dim must be >= 1".into()));
        }
        for (i, ep) in episodes.iter().enumerate() {
            if ep.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "demo episode {i} has {} observations, need at least 2",
                    ep.len()
                )));
            }
            if let Some(o) = ep.iter().find(|o| o.len() != obs_dim) {
                return Err(Error::dim(format!("demo episode {i}"), obs_dim, o.len()));
            }
        }
        Ok(Self { obs_dim, episodes })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn episodes(&self) -> &[Vec<Vec<T>>] {
        &self.episodes
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn num_observations(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    /// Number of consecutive `(o, o')` pairs (no pair crosses episodes).
    pub fn num_pairs(&self) -> usize {
        self.episodes.iter().map(|e| e.len() - 1).sum()
    }

    /// All consecutive pairs, in order.
    pub fn pairs(&self) -> impl Iterator<Item = (&[T], &[T])> {
        self.episodes
            .iter()
            .flat_map(|e| e.windows(2).map(|w| (w[0].as_slice(), w[1].as_slice())))
    }

    /// Uniformly samples consecutive observation pairs with replacement.
    pub fn sample_demo_pairs<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<(Vec<T>, Vec<T>)>> {
        let total = self.num_pairs();
        if total == 0 {
            return Err(Error::Config("demonstration set is empty".into()));
        }
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let mut k = rng.random_range(0..total);
            for e in &self.episodes {
                let n = e.len() - 1;
                if k < n {
                    out.push((e[k].clone(), e[k + 1].clone()));
                    break;
                }
                k -= n;
            }
        }
        Ok(out)
    }

    /// Serialises to the demo text format: `obs_dim,<d>` header, one
    /// comma-separated observation per line, `---` between episodes.
    pub fn to_text(&self) -> String {
        let mut s = format!("obs_dim,{}\n", self.obs_dim);
        for (i, ep) in self.episodes.iter().enumerate() {
            if i > 0 {
                s.push_str("---\n");
            }
            for o in ep {
                let line: Vec<String> = o.iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(s, "{}", line.join(","));
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
            }
        }
        fs::write(path, self.to_text())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    /// Parses the demo text format. Lines wider than `obs_dim` carry action
    /// columns, which are dropped with a warning.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let Some((hdr_idx, header)) = lines.next() else {
            return Err(err(1, "empty demonstration file".into()));
        };
        let obs_dim = header
            .trim()
            .strip_prefix("obs_dim,")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| {
                err(
                    hdr_idx + 1,
                    format!("expected header `obs_dim,<d>`, got `{header}`"),
                )
            })?;

        let mut episodes = Vec::new();
        let mut current: Vec<Vec<T>> = Vec::new();
        let mut warned = false;
        for (idx, line) in lines {
            let line = line.trim();
            if line == "---" {
                if current.is_empty() {
                    return Err(err(idx + 1, "empty episode".into()));
                }
                episodes.push(std::mem::take(&mut current));
                continue;
            }
            let values: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(idx + 1, format!("bad number: {e}")))?;
            if values.len() < obs_dim {
                return Err(err(
                    idx + 1,
                    format!("expected {obs_dim} values, found {}", values.len()),
                ));
            }
            if values.len() > obs_dim && !warned {
                log::warn!(
                    "{}: ignoring {} action column(s); demonstrations are observation-only",
                    path.display(),
                    values.len() - obs_dim
                );
                warned = true;
            }
            current.push(
                values[..obs_dim]
                    .iter()
                    .map(|&v| T::from_f64_lossy(v))
                    .collect(),
            );
        }
        if !current.is_empty() {
            episodes.push(current);
        }
        if episodes.is_empty() {
            return Err(err(hdr_idx + 1, "no observations after header".into()));
        }
        for (i, ep) in episodes.iter().enumerate() {
            if ep.len() < 2 {
                return Err(err(
                    hdr_idx + 1,
                    format!("episode {i} has fewer than 2 observations"),
                ));
            }
        }
        Self::new(obs_dim, episodes)
    }
}

/// Shuffles and returns a permutation of `0..n`.
pub fn shuffled_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

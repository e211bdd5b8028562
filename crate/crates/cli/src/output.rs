//! File writers: trajectory CSVs, JSON summaries and parameter checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tvmc_core::ansatz::{AnsatzKind, VariationalState};
use tvmc_core::tdvp::Trajectory;

use crate::error::{CliError, CliResult};

pub const TRAJECTORY_SCHEMA: &str = "tvmc.trajectory.v1";
pub const CHECKPOINT_SCHEMA: &str = "tvmc.checkpoint.v1";

/// Fixed leading columns of every trajectory CSV; observer columns follow.
pub const TRAJECTORY_COLUMNS: [&str; 8] =
    ["t", "energy_re", "energy_im", "r_squared", "norm_ratio", "mean_var_grad_e", "mean_var_grad2", "frozen"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.12e}"))
}

/// Renders a trajectory as CSV text with a schema header line.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = format!("# schema: {TRAJECTORY_SCHEMA}\n");
    let header: Vec<&str> = TRAJECTORY_COLUMNS.iter().copied().chain(traj.columns.iter().map(String::as_str)).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in &traj.rows {
        let mut fields = vec![
            format!("{:.12e}", row.t),
            format!("{:.12e}", row.energy.re),
            format!("{:.12e}", row.energy.im),
            fmt_opt(row.r_squared),
            format!("{:.12e}", row.norm_ratio),
            fmt_opt(row.mean_var_grad_e),
            fmt_opt(row.mean_var_grad2),
            u8::from(row.frozen).to_string(),
        ];
        fields.extend(row.observables.iter().map(|v| format!("{v:.12e}")));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> CliResult<()> {
    fs::write(path, trajectory_csv(traj))?;
    Ok(())
}

/// Writes `value` as pretty JSON; `value` should carry its own `schema` field.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// A parameter vector at a committed time.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub t: f64,
    pub state: VariationalState,
}

fn kind_line(kind: AnsatzKind) -> String {
    match kind {
        AnsatzKind::DirectTwoParameter => "direct2".into(),
        AnsatzKind::Rbm { n_visible, n_hidden } => format!("rbm {n_visible} {n_hidden}"),
    }
}

fn parse_kind(text: &str) -> Option<AnsatzKind> {
    let parts: Vec<&str> = text.split_whitespace().collect();
    match parts.as_slice() {
        ["direct2"] => Some(AnsatzKind::DirectTwoParameter),
        ["rbm", v, h] => Some(AnsatzKind::Rbm { n_visible: v.parse().ok()?, n_hidden: h.parse().ok()? }),
        _ => None,
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.txt"))
}

/// One header block followed by one parameter per line.
pub fn write_checkpoint(dir: &Path, cp: &Checkpoint) -> CliResult<PathBuf> {
    let mut text = format!(
        "# schema: {CHECKPOINT_SCHEMA}\n# step: {}\n# t: {:.17e}\n# ansatz: {}\n",
        cp.step,
        cp.t,
        kind_line(cp.state.kind())
    );
    for x in cp.state.theta() {
        text.push_str(&format!("{x:.17e}\n"));
    }
    let path = checkpoint_path(dir, cp.step);
    fs::write(&path, text)?;
    Ok(path)
}

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let bad = |what: &str| CliError::MissingCheckpoints(format!("{}: {what}", path.display()));
    let text = fs::read_to_string(path)?;
    let (mut schema, mut step, mut t, mut kind) = (None, None, None, None);
    let mut theta = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(rest) = line.strip_prefix('#') {
            let Some((key, value)) = rest.split_once(':') else { continue };
            let value = value.trim();
            match key.trim() {
                "schema" => schema = Some(value.to_string()),
                "step" => step = value.parse().ok(),
                "t" => t = value.parse().ok(),
                "ansatz" => kind = parse_kind(value),
                _ => {}
            }
        } else {
            theta.push(line.parse::<f64>().map_err(|_| bad("unparsable parameter"))?);
        }
    }
    if schema.as_deref() != Some(CHECKPOINT_SCHEMA) {
        return Err(bad("wrong or missing schema"));
    }
    let kind = kind.ok_or_else(|| bad("missing ansatz"))?;
    let state = VariationalState::new(kind, theta)?;
    Ok(Checkpoint { step: step.ok_or_else(|| bad("missing step"))?, t: t.ok_or_else(|| bad("missing time"))?, state })
}

/// All checkpoints in `dir`, ordered by step.
pub fn read_checkpoints(dir: &Path) -> CliResult<Vec<Checkpoint>> {
    if !dir.is_dir() {
        return Err(CliError::MissingCheckpoints(format!("{} is not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("checkpoint_") && n.ends_with(".txt"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::MissingCheckpoints(format!("no checkpoint files in {}", dir.display())));
    }
    let mut cps = paths.iter().map(|p| read_checkpoint(p)).collect::<CliResult<Vec<_>>>()?;
    cps.sort_by_key(|c| c.step);
    Ok(cps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tvmc_core::estimators::Backend;
    use tvmc_core::spin_model::Hamiltonian;
    use tvmc_core::tdvp::{evolve, IntegratorConfig};

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let state = VariationalState::rbm_random(3, 2, 0.3, &mut rng).unwrap();
        let cp = Checkpoint { step: 7, t: 0.07, state };
        let path = write_checkpoint(dir.path(), &cp).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), cp);
        assert_eq!(read_checkpoints(dir.path()).unwrap(), vec![cp]);
    }

    #[test]
    fn empty_directory_has_no_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_checkpoints(dir.path()), Err(CliError::MissingCheckpoints(_))));
    }

    #[test]
    fn csv_has_schema_and_fixed_columns() {
        let st = VariationalState::rbm_zeros(2, 1).unwrap();
        let h = Hamiltonian::tfim(2, 1.0, 1.0).unwrap();
        let cfg = IntegratorConfig { dt: 0.1, t_max: 0.2, ..Default::default() };
        let traj = evolve(&st, &h, &Backend::FullSummation, &cfg, &mut []).unwrap();
        let csv = trajectory_csv(&traj);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "# schema: tvmc.trajectory.v1");
        assert_eq!(lines.next().unwrap(), TRAJECTORY_COLUMNS.join(","));
        assert_eq!(lines.count(), 3);
    }
}

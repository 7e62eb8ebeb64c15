//! CSV ingestion and emission.
//!
//! Readers collect every problem in a file before failing, so one run lists
//! all bad rows. Writers render into memory and replace the target file with
//! a rename, so a failed run never leaves a truncated file behind.
//!
//! Schemas (UTF-8, `.` decimal separator, header row required):
//!
//! * `trees.csv`: `plot_id,dbh_cm,species[,height_m]`
//! * `plots.csv`: `plot_id,project_id,is_forest,dominant_species,area_m2`,
//!   optional `inclusion_probability`, `single_layered`, `split_plot`, then one
//!   column per metric (`<metric>_<echo>`).
//! * `layers.csv`: `plot_id,mapped_forest,mapped_species`
//! * `truth.csv`: generator ground truth, write-only.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::estimation::{ClassificationLayers, LayerEntry};
use crate::synth::{PlotTruth, N_FACTORS};
use crate::types::{is_known_metric, PlotRecord, Species, TreeRecord, DBH_THRESHOLD_CM};

const PLOT_FIXED: [&str; 5] = ["plot_id", "project_id", "is_forest", "dominant_species", "area_m2"];
const PLOT_OPTIONAL: [&str; 3] = ["inclusion_probability", "single_layered", "split_plot"];
const TREE_FIXED: [&str; 3] = ["plot_id", "dbh_cm", "species"];
const LAYER_FIXED: [&str; 3] = ["plot_id", "mapped_forest", "mapped_species"];

/// Accumulates row-level problems for one file.
struct Problems {
    path: String,
    messages: Vec<String>,
}

impl Problems {
    fn new(path: &Path) -> Self {
        Problems {
            path: path.display().to_string(),
            messages: Vec::new(),
        }
    }

    fn push(&mut self, line: u64, message: impl std::fmt::Display) {
        self.messages.push(format!("{}: line {line}: {message}", self.path));
    }

    fn into_error(self) -> Error {
        Error::ValidationReport {
            count: self.messages.len(),
            messages: self.messages,
        }
    }

    fn finish(self) -> Result<()> {
        if self.messages.is_empty() {
            Ok(())
        } else {
            Err(self.into_error())
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "y" | "t" => Some(true),
        "false" | "0" | "no" | "n" | "f" => Some(false),
        _ => None,
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_species(s: &str) -> Option<Option<Species>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("none") {
        Some(None)
    } else {
        s.parse().ok().map(Some)
    }
}

/// Opens a CSV file. A zero-byte file yields no header and no rows.
fn open(path: &Path) -> Result<Option<csv::Reader<fs::File>>> {
    let file = fs::File::open(path)?;
    if file.metadata()?.len() == 0 {
        return Ok(None);
    }
    Ok(Some(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file)))
}

fn header_index(
    headers: &csv::StringRecord,
    required: &[&str],
    problems: &mut Problems,
) -> HashMap<String, usize> {
    let mut index = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if index.insert(h.to_string(), i).is_some() {
            problems.push(1, format!("duplicate column `{h}`"));
        }
    }
    for r in required {
        if !index.contains_key(*r) {
            problems.push(1, format!("missing required column `{r}`"));
        }
    }
    index
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Reads `trees.csv`. DBH below the field threshold is a hard error.
pub fn read_trees(path: &Path) -> Result<Vec<TreeRecord>> {
    let mut problems = Problems::new(path);
    let Some(mut rdr) = open(path)? else {
        return Ok(Vec::new());
    };
    let headers = rdr.headers()?.clone();
    let idx = header_index(&headers, &TREE_FIXED, &mut problems);
    if !problems.messages.is_empty() {
        return Err(problems.into_error());
    }
    for h in headers.iter() {
        if !TREE_FIXED.contains(&h) && h != "height_m" {
            problems.push(1, format!("unknown column `{h}`"));
        }
    }
    let height_col = idx.get("height_m").copied();

    let mut trees = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                problems.push(line, format!("malformed row: {e}"));
                continue;
            }
        };
        let line = line_of(&rec);
        let plot_id = &rec[idx["plot_id"]];
        if plot_id.is_empty() {
            problems.push(line, "empty plot_id");
        }
        let dbh_raw = &rec[idx["dbh_cm"]];
        let dbh = match parse_f64(dbh_raw) {
            Some(d) if d >= DBH_THRESHOLD_CM => Some(d),
            Some(d) => {
                problems.push(line, format!("dbh_cm {d} is below the {DBH_THRESHOLD_CM} cm threshold"));
                None
            }
            None => {
                problems.push(line, format!("dbh_cm `{dbh_raw}` is not a finite number"));
                None
            }
        };
        let species = match rec[idx["species"]].parse::<Species>() {
            Ok(s) => Some(s),
            Err(_) => {
                problems.push(line, format!("unknown species `{}`", &rec[idx["species"]]));
                None
            }
        };
        let height = match height_col.map(|c| &rec[c]) {
            None | Some("") => None,
            Some(raw) => match parse_f64(raw) {
                Some(h) if h > 0.0 => Some(h),
                _ => {
                    problems.push(line, format!("height_m `{raw}` is not a positive number"));
                    None
                }
            },
        };
        if let (Some(dbh), Some(species)) = (dbh, species) {
            let mut t = TreeRecord::new(plot_id, dbh, species)?;
            t.height = height;
            trees.push(t);
        }
    }
    problems.finish()?;
    Ok(trees)
}

/// Reads `plots.csv` without trees.
pub fn read_plots(path: &Path) -> Result<Vec<PlotRecord>> {
    let mut problems = Problems::new(path);
    let Some(mut rdr) = open(path)? else {
        problems.push(1, "file is empty; a header row is required");
        problems.finish()?;
        return Ok(Vec::new());
    };
    let headers = rdr.headers()?.clone();
    let idx = header_index(&headers, &PLOT_FIXED, &mut problems);
    if !problems.messages.is_empty() {
        return Err(problems.into_error());
    }
    let mut metric_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if PLOT_FIXED.contains(&h) || PLOT_OPTIONAL.contains(&h) {
            continue;
        }
        if is_known_metric(h) {
            metric_cols.push((i, h.to_string()));
        } else {
            problems.push(1, format!("unknown column `{h}`; metric columns must be named <metric>_<first|last|all>"));
        }
    }
    let opt = |name: &str| idx.get(name).copied();
    let (pi_col, single_col, split_col) = (
        opt("inclusion_probability"),
        opt("single_layered"),
        opt("split_plot"),
    );

    let mut plots = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                problems.push(line, format!("malformed row: {e}"));
                continue;
            }
        };
        let line = line_of(&rec);
        let mut ok = true;
        let mut bad = |msg: String| {
            problems.push(line, msg);
            ok = false;
        };

        let plot_id = rec[idx["plot_id"]].to_string();
        if plot_id.is_empty() {
            bad("empty plot_id".into());
        } else if !seen.insert(plot_id.clone()) {
            bad(format!("duplicate plot_id `{plot_id}`"));
        }
        let is_forest = parse_bool(&rec[idx["is_forest"]]).unwrap_or_else(|| {
            bad(format!("is_forest `{}` is not a boolean", &rec[idx["is_forest"]]));
            false
        });
        let dominant_species = parse_species(&rec[idx["dominant_species"]]).unwrap_or_else(|| {
            bad(format!("unknown dominant_species `{}`", &rec[idx["dominant_species"]]));
            None
        });
        let area_raw = &rec[idx["area_m2"]];
        let area_m2 = match parse_f64(area_raw) {
            Some(a) if a > 0.0 => a,
            _ => {
                bad(format!("area_m2 `{area_raw}` is not a positive number"));
                1.0
            }
        };
        let mut plot = PlotRecord::new(plot_id, &rec[idx["project_id"]], is_forest);
        plot.dominant_species = dominant_species;
        plot.area_m2 = area_m2;
        if let Some(c) = pi_col {
            match parse_f64(&rec[c]) {
                Some(p) if p > 0.0 && p <= 1.0 => plot.inclusion_probability = p,
                _ => bad(format!("inclusion_probability `{}` is outside (0, 1]", &rec[c])),
            }
        }
        for (col, slot, name) in [
            (single_col, &mut plot.single_layered, "single_layered"),
            (split_col, &mut plot.split_plot, "split_plot"),
        ] {
            if let Some(c) = col {
                if !rec[c].is_empty() {
                    match parse_bool(&rec[c]) {
                        Some(b) => *slot = Some(b),
                        None => bad(format!("{name} `{}` is not a boolean", &rec[c])),
                    }
                }
            }
        }
        for (c, name) in &metric_cols {
            match parse_f64(&rec[*c]) {
                Some(v) => {
                    plot.metrics.insert(name.clone(), v);
                }
                None => bad(format!("metric `{name}` value `{}` is missing or not finite", &rec[*c])),
            }
        }
        if ok {
            plots.push(plot);
        }
    }
    problems.finish()?;
    Ok(plots)
}

/// Moves validation messages into `messages`; other errors pass through.
fn collect_report<T>(r: Result<T>, messages: &mut Vec<String>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::ValidationReport { messages: m, .. }) => {
            messages.extend(m);
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Reads plots and trees and attaches each tree to its plot.
///
/// Besides the per-file rules this checks that every tree belongs to a known
/// forest plot and that the inclusion probability is shared by all plots.
pub fn read_dataset(plots_path: &Path, trees_path: &Path) -> Result<Vec<PlotRecord>> {
    let mut messages = Vec::new();
    let plots = collect_report(read_plots(plots_path), &mut messages)?;
    let trees = collect_report(read_trees(trees_path), &mut messages)?;
    let (Some(mut plots), Some(trees)) = (plots, trees) else {
        return Err(Error::ValidationReport {
            count: messages.len(),
            messages,
        });
    };
    let position: HashMap<String, usize> =
        plots.iter().enumerate().map(|(i, p)| (p.plot_id.clone(), i)).collect();
    let mut orphans: BTreeMap<String, usize> = BTreeMap::new();
    let mut on_non_forest: BTreeMap<String, usize> = BTreeMap::new();
    for t in trees {
        match position.get(&t.plot_id) {
            None => *orphans.entry(t.plot_id).or_default() += 1,
            Some(&i) if !plots[i].is_forest => *on_non_forest.entry(t.plot_id).or_default() += 1,
            Some(&i) => plots[i].trees.push(t),
        }
    }
    let trees_path = trees_path.display();
    for (id, n) in orphans {
        messages.push(format!("{trees_path}: {n} tree(s) reference unknown plot `{id}`"));
    }
    for (id, n) in on_non_forest {
        messages.push(format!("{trees_path}: {n} tree(s) recorded on non-forest plot `{id}`"));
    }
    if let Some(first) = plots.first() {
        let pi = first.inclusion_probability;
        let differing = plots.iter().filter(|p| p.inclusion_probability != pi).count();
        if differing > 0 {
            messages.push(format!(
                "{}: inclusion_probability differs between plots ({differing} plot(s) differ from {pi})",
                plots_path.display()
            ));
        }
        let names: Vec<&String> = first.metrics.keys().collect();
        if plots.iter().any(|p| p.metrics.keys().ne(names.iter().copied())) {
            messages.push(format!("{}: plots carry different metric sets", plots_path.display()));
        }
    }
    if messages.is_empty() {
        Ok(plots)
    } else {
        Err(Error::ValidationReport {
            count: messages.len(),
            messages,
        })
    }
}

/// Reads `layers.csv`. Mapped-forest rows without a species are allowed here
/// and rejected when the layers are applied.
pub fn read_layers(path: &Path) -> Result<ClassificationLayers> {
    let mut problems = Problems::new(path);
    let Some(mut rdr) = open(path)? else {
        return Ok(ClassificationLayers::default());
    };
    let headers = rdr.headers()?.clone();
    let idx = header_index(&headers, &LAYER_FIXED, &mut problems);
    if !problems.messages.is_empty() {
        return Err(problems.into_error());
    }
    let mut entries = BTreeMap::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                problems.push(e.position().map_or(0, |p| p.line()), format!("malformed row: {e}"));
                continue;
            }
        };
        let line = line_of(&rec);
        let id = rec[idx["plot_id"]].to_string();
        let forest = parse_bool(&rec[idx["mapped_forest"]]);
        let species = parse_species(&rec[idx["mapped_species"]]);
        match (forest, species) {
            (Some(mapped_forest), Some(mapped_species)) => {
                let entry = LayerEntry {
                    mapped_forest,
                    mapped_species,
                };
                if entries.insert(id.clone(), entry).is_some() {
                    problems.push(line, format!("duplicate plot_id `{id}`"));
                }
            }
            (None, _) => problems.push(line, format!("mapped_forest `{}` is not a boolean", &rec[idx["mapped_forest"]])),
            (_, None) => problems.push(line, format!("unknown mapped_species `{}`", &rec[idx["mapped_species"]])),
        }
    }
    problems.finish()?;
    Ok(ClassificationLayers { entries })
}

/// Replaces `path` with `bytes` through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Renders rows into CSV bytes.
pub fn to_csv_bytes<I, R>(header: &[String], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn species_cell(s: Option<Species>) -> String {
    s.map(|s| s.as_str().to_string()).unwrap_or_default()
}

pub fn trees_csv(plots: &[PlotRecord]) -> Result<Vec<u8>> {
    let with_height = plots.iter().flat_map(|p| &p.trees).any(|t| t.height.is_some());
    let mut header: Vec<String> = TREE_FIXED.iter().map(|s| s.to_string()).collect();
    if with_height {
        header.push("height_m".into());
    }
    let rows = plots.iter().flat_map(|p| &p.trees).map(|t| {
        let mut row = vec![t.plot_id.clone(), t.dbh.to_string(), t.species.to_string()];
        if with_height {
            row.push(t.height.map(|h| h.to_string()).unwrap_or_default());
        }
        row
    });
    to_csv_bytes(&header, rows)
}

/// Metric columns follow the first plot's (sorted) metric names.
pub fn plots_csv(plots: &[PlotRecord]) -> Result<Vec<u8>> {
    let metric_names: Vec<String> = plots
        .first()
        .map(|p| p.metrics.keys().cloned().collect())
        .unwrap_or_default();
    let single = plots.iter().any(|p| p.single_layered.is_some());
    let split = plots.iter().any(|p| p.split_plot.is_some());
    let mut header: Vec<String> = PLOT_FIXED.iter().map(|s| s.to_string()).collect();
    header.push("inclusion_probability".into());
    if single {
        header.push("single_layered".into());
    }
    if split {
        header.push("split_plot".into());
    }
    header.extend(metric_names.iter().cloned());
    let opt_bool = |b: Option<bool>| b.map(|b| b.to_string()).unwrap_or_default();
    let mut rows = Vec::with_capacity(plots.len());
    for p in plots {
        let mut row = vec![
            p.plot_id.clone(),
            p.project_id.clone(),
            p.is_forest.to_string(),
            species_cell(p.dominant_species),
            p.area_m2.to_string(),
            p.inclusion_probability.to_string(),
        ];
        if single {
            row.push(opt_bool(p.single_layered));
        }
        if split {
            row.push(opt_bool(p.split_plot));
        }
        for name in &metric_names {
            row.push(p.metric(name)?.to_string());
        }
        rows.push(row);
    }
    to_csv_bytes(&header, rows)
}

pub fn layers_csv(layers: &ClassificationLayers) -> Result<Vec<u8>> {
    let header: Vec<String> = LAYER_FIXED.iter().map(|s| s.to_string()).collect();
    let rows = layers.entries.iter().map(|(id, e)| {
        vec![id.clone(), e.mapped_forest.to_string(), species_cell(e.mapped_species)]
    });
    to_csv_bytes(&header, rows)
}

pub fn truth_csv(truth: &[PlotTruth]) -> Result<Vec<u8>> {
    let mut header: Vec<String> = ["plot_id", "project_id", "is_forest", "young", "stand_species"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=N_FACTORS).map(|i| format!("factor_{i}")));
    header.extend(
        [
            "project_effect_scale",
            "project_effect_shape",
            "plot_effect_scale",
            "plot_effect_shape",
            "shape",
            "scale",
            "bimodal",
            "expected_stems",
            "n_trees",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    let rows = truth.iter().map(|t| {
        let mut row = vec![
            t.plot_id.clone(),
            t.project_id.clone(),
            t.is_forest.to_string(),
            t.young.to_string(),
            species_cell(t.stand_species),
        ];
        row.extend(t.factors.iter().map(f64::to_string));
        row.extend([
            t.project_effect_scale.to_string(),
            t.project_effect_shape.to_string(),
            t.plot_effect_scale.to_string(),
            t.plot_effect_shape.to_string(),
            t.shape.to_string(),
            t.scale.to_string(),
            t.bimodal.to_string(),
            t.expected_stems.to_string(),
            t.n_trees.to_string(),
        ]);
        row
    });
    to_csv_bytes(&header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_file(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn scratch(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("dbhdist-io-{tag}-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn dbh_below_threshold_reports_line() {
        let d = scratch("dbh");
        let p = tmp_file(&d, "trees.csv", "plot_id,dbh_cm,species\n1,12.0,pine\n1,4.2,pine\n1,oak,birch\n");
        let err = read_trees(&p).unwrap_err();
        let Error::ValidationReport { messages, .. } = err else { panic!() };
        assert_eq!(messages.len(), 3, "{messages:?}");
        assert!(messages[0].contains("line 3") && messages[0].contains("4.2"));
        assert!(messages[1].contains("line 4") && messages[2].contains("line 4"));
    }

    #[test]
    fn empty_trees_file_and_non_forest_plots() {
        let d = scratch("empty");
        let trees = tmp_file(&d, "trees.csv", "");
        let plots = tmp_file(
            &d,
            "plots.csv",
            "plot_id,project_id,is_forest,dominant_species,area_m2,h95_all\na,P,false,,250,0.0\nb,P,false,,250,1.5\n",
        );
        let ds = read_dataset(&plots, &trees).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.iter().all(|p| !p.is_forest && p.trees.is_empty()));
    }

    #[test]
    fn plot_problems_listed_exhaustively() {
        let d = scratch("plots");
        let plots = tmp_file(
            &d,
            "plots.csv",
            "plot_id,project_id,is_forest,dominant_species,area_m2,inclusion_probability,h95_all\n\
             a,P,maybe,,250,0.001,1\n\
             a,P,true,larch,-1,2,\n",
        );
        let Error::ValidationReport { messages, .. } = read_plots(&plots).unwrap_err() else { panic!() };
        let joined = messages.join("\n");
        for needle in ["is_forest", "duplicate plot_id", "larch", "area_m2", "inclusion_probability", "h95_all"] {
            assert!(joined.contains(needle), "missing `{needle}` in\n{joined}");
        }
        assert!(messages.iter().all(|m| m.contains("line 2") || m.contains("line 3")));
    }

    #[test]
    fn unknown_metric_column_rejected() {
        let d = scratch("cols");
        let plots = tmp_file(&d, "plots.csv", "plot_id,project_id,is_forest,dominant_species,area_m2,h96_all\n");
        assert!(read_plots(&plots).is_err());
    }

    #[test]
    fn cross_file_rules() {
        let d = scratch("cross");
        let plots = tmp_file(
            &d,
            "plots.csv",
            "plot_id,project_id,is_forest,dominant_species,area_m2,inclusion_probability\n\
             a,P,true,pine,250,0.001\nb,P,false,,250,0.002\n",
        );
        let trees = tmp_file(&d, "trees.csv", "plot_id,dbh_cm,species\na,10,pine\nb,10,pine\nz,9,spruce\n");
        let Error::ValidationReport { messages, .. } = read_dataset(&plots, &trees).unwrap_err() else {
            panic!()
        };
        assert_eq!(messages.len(), 3, "{messages:?}");
    }

    #[test]
    fn round_trip() {
        use crate::par::Execution;
        use crate::synth::{generate, SynthConfig};
        let data = generate(
            &SynthConfig {
                n_plots: 40,
                ..Default::default()
            },
            Execution::Sequential,
        )
        .unwrap();
        let d = scratch("rt");
        let (pp, tp, lp) = (d.join("plots.csv"), d.join("trees.csv"), d.join("layers.csv"));
        write_atomic(&pp, &plots_csv(&data.plots).unwrap()).unwrap();
        write_atomic(&tp, &trees_csv(&data.plots).unwrap()).unwrap();
        write_atomic(&lp, &layers_csv(&data.layers).unwrap()).unwrap();
        assert_eq!(read_dataset(&pp, &tp).unwrap(), data.plots);
        assert_eq!(read_layers(&lp).unwrap(), data.layers);
        assert!(!truth_csv(&data.truth).unwrap().is_empty());
        assert!(fs::read_dir(&d).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
    }
}

//! Deterministic text export: columnar field CSVs, diagnostic tables, and
//! key-value manifests.
//!
//! All floating-point output uses 17 significant digits so doubles
//! round-trip exactly and byte-level determinism checks are meaningful.

use crate::grid::SampledField;

/// A double with 17 significant digits; round-trips exactly.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Columnar field CSV: header `t,x1..xd,v1..vk`, one row per (time slice,
/// grid node), axis 0 fastest.
pub fn field_csv(field: &SampledField) -> String {
    let dim = field.grid.dim;
    let comps = field.comps;
    let mut out = String::from("t");
    for a in 1..=dim {
        out.push_str(&format!(",x{a}"));
    }
    for c in 1..=comps {
        out.push_str(&format!(",v{c}"));
    }
    out.push('\n');
    let nodes = field.grid.node_count();
    for k in 0..field.time.slices() {
        let t = field.time.time(k);
        let slice = field.slice(k);
        for i in 0..nodes {
            out.push_str(&fmt17(t));
            let x = field.grid.point(i);
            for a in 0..dim {
                out.push(',');
                out.push_str(&fmt17(x[a]));
            }
            for c in 0..comps {
                out.push(',');
                out.push_str(&fmt17(slice[i * comps + c]));
            }
            out.push('\n');
        }
    }
    out
}

/// One row of a diagnostic report CSV.
pub struct DiagnosticRow {
    pub check: String,
    pub time: f64,
    pub path: i64,
    pub defect: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn diagnostics_csv(rows: &[DiagnosticRow]) -> String {
    let mut out = String::from("check,time,path,defect,tolerance,pass\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.check,
            fmt17(r.time),
            r.path,
            fmt17(r.defect),
            fmt17(r.tolerance),
            if r.pass { "pass" } else { "fail" }
        ));
    }
    out
}

/// Generic CSV table; every cell is already formatted.
pub fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

/// Flat `key = value` manifest, in the order given.
pub fn manifest_text(entries: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{SpaceGrid, TimeGrid};

    #[test]
    fn doubles_round_trip_through_the_formatter() {
        for v in [0.1, -3.25e-17, std::f64::consts::PI, 1e300, -0.0] {
            let s = fmt17(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{s}");
        }
    }

    #[test]
    fn field_csv_shape_matches_the_grid() {
        let g = SpaceGrid::new(2, 1.0, 1.0).unwrap();
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let f = SampledField::from_closure(g.clone(), tg, 2, |t, x, out| {
            out[0] = t + x[0];
            out[1] = x[1];
        });
        let csv = field_csv(&f);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x1,x2,v1,v2");
        // 3 slices x 9 nodes data rows plus the header
        assert_eq!(lines.len(), 1 + 3 * 9);
        assert_eq!(lines[1].split(',').count(), 5);
    }

    #[test]
    fn diagnostics_and_manifest_are_stable_text() {
        let rows = vec![DiagnosticRow {
            check: "mass".into(),
            time: 0.5,
            path: 3,
            defect: 1e-4,
            tolerance: 1e-3,
            pass: true,
        }];
        let csv = diagnostics_csv(&rows);
        assert!(csv.starts_with("check,time,path,defect,tolerance,pass\n"));
        assert!(csv.contains(",pass\nmass,") || csv.lines().count() == 2);
        let man = manifest_text(&[("lambda".into(), fmt17(8.0))]);
        assert_eq!(man, format!("lambda = {}\n", fmt17(8.0)));
    }
}

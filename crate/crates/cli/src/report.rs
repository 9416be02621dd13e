//! Analytic KV-cache sizes per token.

use std::io::Write;

use mtla_core::{AttentionConfig, Variant};

use crate::{CliError, CliResult, ReportArgs};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: Variant,
    /// Variant-specific knob, such as `g=4` or `s=2`; `-` when there is none.
    pub params: String,
    pub elems_per_token: f64,
    pub ratio_vs_mha: f64,
}

fn latent_config(d_h: usize, n_h: usize, layers: usize) -> AttentionConfig {
    AttentionConfig {
        d: n_h * d_h,
        n_h,
        d_h,
        g: 1,
        r: 4 * d_h,
        d_rope: d_h / 2,
        s: 1,
        l: layers,
        d_hyp: 64,
    }
}

/// Rows for MHA, MQA, GQA per group count, MLA, and MTLA per ratio, with
/// latent width `4 d_h` and rotary width `d_h / 2`.
pub fn cache_report(
    d_h: usize,
    n_h: usize,
    layers: usize,
    s_list: &[usize],
    g_list: &[usize],
) -> CliResult<Vec<ReportRow>> {
    if d_h < 2 || !d_h.is_multiple_of(2) || n_h == 0 || layers == 0 {
        return Err(CliError::Usage(format!(
            "need even d_h >= 2, n_h >= 1 and layers >= 1 (got {d_h}, {n_h}, {layers})"
        )));
    }
    let base = latent_config(d_h, n_h, layers);
    let mha = base.cache_elements_per_token(Variant::Mha);
    let row = |variant, params: String, cfg: AttentionConfig| {
        let e = cfg.cache_elements_per_token(variant);
        ReportRow {
            variant,
            params,
            elems_per_token: e,
            ratio_vs_mha: mha / e,
        }
    };
    let mut rows = vec![
        row(Variant::Mha, "-".into(), base),
        row(Variant::Mqa, "-".into(), base),
    ];
    let default_g = [(n_h / 2).max(1)];
    let groups = if g_list.is_empty() {
        &default_g[..]
    } else {
        g_list
    };
    for &g in groups {
        if g == 0 || !n_h.is_multiple_of(g) {
            return Err(CliError::Usage(format!(
                "g = {g} does not divide n_h = {n_h}"
            )));
        }
        rows.push(row(Variant::Gqa, format!("g={g}"), base.with_groups(g)));
    }
    rows.push(row(Variant::Mla, "-".into(), base));
    for &s in s_list {
        if s == 0 {
            return Err(CliError::Usage("s must be at least 1".into()));
        }
        rows.push(row(Variant::Mtla, format!("s={s}"), base.with_s(s)));
    }
    Ok(rows)
}

pub(crate) fn number(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

pub fn cmd_cache_report(a: &ReportArgs, out: &mut dyn Write) -> CliResult {
    let rows = cache_report(a.d_h, a.n_h, a.layers, &a.s_list, &a.g_list)?;
    writeln!(out, "variant,params,elems_per_token,ratio_vs_mha")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.2}",
            r.variant,
            r.params,
            number(r.elems_per_token),
            r.ratio_vs_mha
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn find<'a>(rows: &'a [ReportRow], v: Variant, p: &str) -> &'a ReportRow {
        rows.iter()
            .find(|r| r.variant == v && r.params == p)
            .unwrap()
    }

    #[test]
    fn default_sizes() {
        let rows = cache_report(64, 8, 9, &[1, 2], &[]).unwrap();
        assert_eq!(find(&rows, Variant::Mha, "-").elems_per_token, 9216.0);
        assert_eq!(find(&rows, Variant::Mqa, "-").elems_per_token, 1152.0);
        assert_eq!(find(&rows, Variant::Gqa, "g=4").elems_per_token, 4608.0);
        let mtla = find(&rows, Variant::Mtla, "s=2");
        assert_eq!(mtla.elems_per_token, 1296.0);
        assert!((mtla.ratio_vs_mha - 64.0 / 9.0).abs() < 1e-12);
        assert_eq!(
            find(&rows, Variant::Mtla, "s=1").elems_per_token,
            find(&rows, Variant::Mla, "-").elems_per_token
        );
    }

    #[test]
    fn mtla_s2_is_near_mqa() {
        let rows = cache_report(64, 8, 9, &[2], &[]).unwrap();
        let mqa = find(&rows, Variant::Mqa, "-").elems_per_token;
        let mtla = find(&rows, Variant::Mtla, "s=2").elems_per_token;
        assert!((mtla / mqa - 1.125).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_groups() {
        assert!(matches!(
            cache_report(64, 8, 9, &[2], &[3]),
            Err(CliError::Usage(_))
        ));
        assert!(cache_report(63, 8, 9, &[2], &[]).is_err());
    }

    #[test]
    fn output_table() {
        let a = ReportArgs {
            d_h: 64,
            n_h: 8,
            layers: 9,
            s_list: vec![3],
            g_list: vec![],
        };
        let mut buf = Vec::new();
        cmd_cache_report(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("variant,params,elems_per_token,ratio_vs_mha\nmha,-,9216,1.00\n"));
        assert!(text.contains("mtla,s=3,864,10.67\n"));
    }
}

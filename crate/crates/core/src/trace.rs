use serde::{Deserialize, Serialize};

/// Column order of the trace CSV.
pub const CSV_HEADER: &str = "t,loss,grad_norm2,consensus2,delta_mass,bits_cum";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    /// `f(x̄_t)`
    pub loss: f64,
    /// `||∇f(x̄_t)||²`
    pub grad_norm2: f64,
    /// `Σᵢ ||xᵢ − x̄||²`
    pub consensus2: f64,
    /// `Σᵢ ||δᵢ||²`; zero for algorithms without error memory.
    pub delta_mass: f64,
    pub bits_cum: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// First recorded iteration whose loss is at or below `target`.
    pub fn iters_to_loss(&self, target: f64) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.loss <= target)
    }

    /// CSV text with [`CSV_HEADER`]; floats use the shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{}\n",
                r.t, r.loss, r.grad_norm2, r.consensus2, r.delta_mass, r.bits_cum
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Option<Trace> {
        let mut lines = text.lines();
        if lines.next()? != CSV_HEADER {
            return None;
        }
        let records = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 6 {
                    return None;
                }
                Some(TraceRecord {
                    t: f[0].parse().ok()?,
                    loss: f[1].parse().ok()?,
                    grad_norm2: f[2].parse().ok()?,
                    consensus2: f[3].parse().ok()?,
                    delta_mass: f[4].parse().ok()?,
                    bits_cum: f[5].parse().ok()?,
                })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Trace { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csv_roundtrip(vals in prop::collection::vec((any::<f64>(), 0u64..1 << 40), 0..20)) {
            let trace = Trace {
                records: vals
                    .iter()
                    .enumerate()
                    .filter(|(_, (v, _))| v.is_finite())
                    .map(|(t, (v, b))| TraceRecord {
                        t,
                        loss: *v,
                        grad_norm2: v.abs(),
                        consensus2: 0.0,
                        delta_mass: v * 0.5,
                        bits_cum: *b,
                    })
                    .collect(),
            };
            prop_assert_eq!(Trace::from_csv(&trace.to_csv()).unwrap(), trace);
        }
    }

    #[test]
    fn target_lookup() {
        let rec = |t, loss| TraceRecord { t, loss, grad_norm2: 0.0, consensus2: 0.0, delta_mass: 0.0, bits_cum: 0 };
        let tr = Trace { records: vec![rec(0, 3.0), rec(5, 1.0), rec(10, 0.5)] };
        assert_eq!(tr.iters_to_loss(1.0).unwrap().t, 5);
        assert!(tr.iters_to_loss(0.1).is_none());
    }
}

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// One row per `(epoch, task)` of a run. `eval_acc[t]` is the accuracy on
/// task `t`'s evaluation set; `None` fields serialize as empty.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub epoch: usize,
    pub task: usize,
    pub total: f64,
    pub nll: f64,
    pub entropy: f64,
    pub cross_entropy: f64,
    pub grad_std: Option<f64>,
    pub train_acc: Option<f64>,
    pub eval_acc: Vec<Option<f64>>,
    pub ece: Option<f64>,
    pub auc: Option<f64>,
}

pub fn metrics_header(n_tasks: usize) -> Vec<String> {
    let mut h: Vec<String> = ["run_id", "epoch", "task", "total", "nll", "entropy", "cross_entropy", "grad_std", "train_acc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..n_tasks).map(|t| format!("eval_acc_task{t}")));
    h.push("ece".into());
    h.push("auc".into());
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the header on construction and one line per record, LF-terminated.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
    n_tasks: usize,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W, n_tasks: usize) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        inner.write_record(metrics_header(n_tasks))?;
        Ok(Self { inner, n_tasks })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        if r.eval_acc.len() != self.n_tasks {
            return Err(Error::Structure(format!(
                "record has {} task accuracies, file has {}",
                r.eval_acc.len(),
                self.n_tasks
            )));
        }
        let mut row = vec![
            r.run_id.clone(),
            r.epoch.to_string(),
            r.task.to_string(),
            r.total.to_string(),
            r.nll.to_string(),
            r.entropy.to_string(),
            r.cross_entropy.to_string(),
            opt(r.grad_std),
            opt(r.train_acc),
        ];
        row.extend(r.eval_acc.iter().map(|v| opt(*v)));
        row.push(opt(r.ece));
        row.push(opt(r.auc));
        self.inner.write_record(&row)?;
        Ok(())
    }

    pub fn finish(self) -> Result<W> {
        self.inner.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

pub fn write_metrics<W: Write>(out: W, n_tasks: usize, records: &[MetricsRecord]) -> Result<W> {
    let mut w = MetricsWriter::new(out, n_tasks)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

pub fn metrics_to_string(n_tasks: usize, records: &[MetricsRecord]) -> Result<String> {
    let bytes = write_metrics(Vec::new(), n_tasks, records)?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn parse_f64(field: &str, row: usize, name: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::invalid(format!("row {row}: column {name}: {field:?} is not a number")))
}

fn parse_opt(field: &str, row: usize, name: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_f64(field, row, name).map(Some)
    }
}

/// Parses a metrics file, returning the task count implied by its header.
pub fn read_metrics<R: Read>(input: R) -> Result<(usize, Vec<MetricsRecord>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 11 {
        return Err(Error::invalid(format!("metrics header has {} columns", header.len())));
    }
    let n_tasks = header.len() - 11;
    if header != metrics_header(n_tasks) {
        return Err(Error::invalid(format!("unexpected metrics header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let f = |c: usize| rec.get(c).unwrap_or("");
        let int = |c: usize, name: &str| -> Result<usize> {
            f(c).parse::<usize>()
                .map_err(|_| Error::invalid(format!("row {row}: column {name}: {:?} is not an integer", f(c))))
        };
        let eval_acc = (0..n_tasks)
            .map(|t| parse_opt(f(9 + t), row, "eval_acc"))
            .collect::<Result<Vec<_>>>()?;
        out.push(MetricsRecord {
            run_id: f(0).to_string(),
            epoch: int(1, "epoch")?,
            task: int(2, "task")?,
            total: parse_f64(f(3), row, "total")?,
            nll: parse_f64(f(4), row, "nll")?,
            entropy: parse_f64(f(5), row, "entropy")?,
            cross_entropy: parse_f64(f(6), row, "cross_entropy")?,
            grad_std: parse_opt(f(7), row, "grad_std")?,
            train_acc: parse_opt(f(8), row, "train_acc")?,
            eval_acc,
            ece: parse_opt(f(9 + n_tasks), row, "ece")?,
            auc: parse_opt(f(10 + n_tasks), row, "auc")?,
        });
    }
    Ok((n_tasks, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize) -> MetricsRecord {
        MetricsRecord {
            run_id: "r1".into(),
            epoch,
            task: 0,
            total: 1.5,
            nll: 1.25,
            entropy: -0.5,
            cross_entropy: -0.75,
            grad_std: Some(0.01),
            train_acc: None,
            eval_acc: vec![Some(0.9), None],
            ece: None,
            auc: Some(0.875),
        }
    }

    #[test]
    fn header_is_exact() {
        let s = metrics_to_string(2, &[]).unwrap();
        assert_eq!(
            s,
            "run_id,epoch,task,total,nll,entropy,cross_entropy,grad_std,train_acc,eval_acc_task0,eval_acc_task1,ece,auc\n"
        );
    }

    #[test]
    fn empty_fields_and_round_trip() {
        let s = metrics_to_string(2, &[rec(0), rec(1)]).unwrap();
        let line = s.lines().nth(1).unwrap();
        assert_eq!(line, "r1,0,0,1.5,1.25,-0.5,-0.75,0.01,,0.9,,,0.875");
        assert!(!s.contains('\r'));
        let (n, back) = read_metrics(s.as_bytes()).unwrap();
        assert_eq!(n, 2);
        assert_eq!(back, vec![rec(0), rec(1)]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(read_metrics("a,b\n".as_bytes()).is_err());
        let mut s = metrics_to_string(0, &[]).unwrap();
        s.push_str("r,x,0,1,1,1,1,,,,\n");
        assert!(read_metrics(s.as_bytes()).is_err());
        let mut w = MetricsWriter::new(Vec::new(), 1).unwrap();
        assert!(w.write(&rec(0)).is_err());
    }
}

/// Column-aligned text table: text columns left-aligned, numeric ones right.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row<S: Into<String>>(&mut self, cells: impl IntoIterator<Item = S>) {
        self.rows.push(cells.into_iter().map(Into::into).collect());
    }

    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut width = vec![0; cols];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let numeric = |c: &str| {
            !c.is_empty()
                && c.trim_start_matches(['-', '+'])
                    .chars()
                    .next()
                    .is_some_and(|ch| ch.is_ascii_digit())
        };
        // a column is right-aligned when every filled body cell is numeric
        let right: Vec<bool> = (0..cols)
            .map(|i| {
                let mut filled = self
                    .rows
                    .iter()
                    .filter_map(|r| r.get(i))
                    .filter(|c| !c.is_empty() && c.as_str() != "-")
                    .peekable();
                filled.peek().is_some() && filled.all(|c| numeric(c))
            })
            .collect();
        let mut out = String::new();
        for r in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = (0..cols)
                .map(|i| {
                    let c = r.get(i).map(String::as_str).unwrap_or("");
                    let pad = width[i] - c.chars().count();
                    if right[i] {
                        format!("{}{c}", " ".repeat(pad))
                    } else {
                        format!("{c}{}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

pub fn pct(x: f64) -> String {
    format!("{x:.1}")
}

pub fn opt_pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), pct)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligns_columns() {
        let mut t = Table::new(["name", "acc"]);
        t.row(["sex", "91.4"]);
        t.row(["location", "7.0"]);
        assert_eq!(
            t.render(),
            "name       acc\nsex       91.4\nlocation   7.0\n"
        );
    }
}

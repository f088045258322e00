use std::fmt;

/// One checked hypothesis with its outcome and a human-readable detail line.
#[derive(Debug, Clone)]
pub struct AssumptionItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct AssumptionReport {
    pub items: Vec<AssumptionItem>,
}

impl AssumptionReport {
    pub fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.items.push(AssumptionItem { name: name.into(), passed, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn item(&self, name: &str) -> Option<&AssumptionItem> {
        self.items.iter().find(|i| i.name == name)
    }

    pub fn extend(&mut self, other: AssumptionReport) {
        self.items.extend(other.items);
    }
}

impl fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for item in &self.items {
            let tag = if item.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{tag} {}: {}", item.name, item.detail)?;
        }
        Ok(())
    }
}

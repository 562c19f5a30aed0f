//! Trainable and frozen parameter counts, per module.

use m2clip_autograd::ParamStore;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleCount {
    pub module: String,
    pub trainable: usize,
    pub frozen: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen: usize,
    /// Modules in first-registration order.
    pub modules: Vec<ModuleCount>,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }

    pub fn module(&self, name: &str) -> Option<&ModuleCount> {
        self.modules.iter().find(|m| m.module == name)
    }

    /// Aligned table with a totals row.
    pub fn to_table(&self) -> String {
        let w = self.modules.iter().map(|m| m.module.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<w$}  {:>10}  {:>10}\n", "module", "trainable", "frozen");
        for m in &self.modules {
            out.push_str(&format!("{:<w$}  {:>10}  {:>10}\n", m.module, m.trainable, m.frozen));
        }
        out.push_str(&format!("{:<w$}  {:>10}  {:>10}\n", "total", self.trainable, self.frozen));
        out
    }
}

/// Groups a parameter name into its module: an adapter, a backbone layer,
/// or the owning component.
pub fn module_of(name: &str) -> String {
    let segs: Vec<&str> = name.split('.').collect();
    let parent = &segs[..segs.len().saturating_sub(1).max(1)];
    if let Some(i) = parent.iter().position(|s| *s == "ted" || *s == "adapter") {
        return parent[..=i].join(".");
    }
    for (i, s) in parent.iter().enumerate() {
        if s.starts_with("layer") {
            return parent[..=i].join(".");
        }
        if matches!(*s, "ln1" | "ln2" | "attn" | "fc1" | "fc2" | "in_map") {
            return parent[..i].join(".");
        }
    }
    parent.join(".")
}

/// Enumerates every registered parameter.
pub fn count_parameters(store: &ParamStore) -> ParamCounts {
    let mut modules: Vec<ModuleCount> = Vec::new();
    let (mut trainable, mut frozen) = (0, 0);
    for (_, p) in store.iter() {
        let n = p.tensor.numel();
        let key = module_of(&p.name);
        let idx = match modules.iter().position(|m| m.module == key) {
            Some(i) => i,
            None => {
                modules.push(ModuleCount {
                    module: key,
                    trainable: 0,
                    frozen: 0,
                });
                modules.len() - 1
            }
        };
        if p.trainable {
            modules[idx].trainable += n;
            trainable += n;
        } else {
            modules[idx].frozen += n;
            frozen += n;
        }
    }
    ParamCounts {
        trainable,
        frozen,
        modules,
    }
}

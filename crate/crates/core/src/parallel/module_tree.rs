use std::collections::BTreeSet;

/// Dotted-name hierarchy of a model's hookable sites and parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModuleTree {
    sites: Vec<String>,
    params: Vec<String>,
}

impl ModuleTree {
    /// `sites` must be listed in forward-pass order; duplicates are dropped.
    pub fn new(sites: Vec<String>, params: Vec<String>) -> Self {
        let mut seen = BTreeSet::new();
        let sites = sites.into_iter().filter(|s| seen.insert(s.clone())).collect();
        Self { sites, params }
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    pub fn parameters(&self) -> &[String] {
        &self.params
    }

    pub fn has_site(&self, name: &str) -> bool {
        self.sites.iter().any(|s| s == name)
    }

    pub fn has_parameter(&self, name: &str) -> bool {
        self.params.iter().any(|s| s == name)
    }

    /// Position of a site in forward order.
    pub fn site_index(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s == name)
    }

    /// Immediate child names under `prefix` ("" for the root).
    pub fn children(&self, prefix: &str) -> Vec<String> {
        let mut out = BTreeSet::new();
        for s in self.sites.iter().chain(&self.params) {
            let rest = if prefix.is_empty() {
                Some(s.as_str())
            } else {
                s.strip_prefix(prefix).and_then(|r| r.strip_prefix('.'))
            };
            if let Some(rest) = rest {
                if let Some(head) = rest.split('.').next() {
                    out.insert(head.to_string());
                }
            }
        }
        out.into_iter().collect()
    }

    /// Up to `n` names closest to `name` by edit distance.
    pub fn near_matches<'a>(candidates: impl IntoIterator<Item = &'a String>, name: &str, n: usize) -> Vec<String> {
        let mut scored: Vec<(usize, &String)> = candidates
            .into_iter()
            .map(|c| (strsim::levenshtein(c, name), c))
            .collect();
        scored.sort();
        scored.into_iter().take(n).map(|(_, c)| c.clone()).collect()
    }

    pub fn near_sites(&self, name: &str) -> Vec<String> {
        Self::near_matches(&self.sites, name, 5)
    }

    pub fn near_parameters(&self, name: &str) -> Vec<String> {
        Self::near_matches(&self.params, name, 5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hierarchy_and_near_matches() {
        let t = ModuleTree::new(
            vec!["embed".into(), "layers.0".into(), "layers.0.attn".into(), "layers.1".into(), "norm".into()],
            vec!["layers.0.attn.q.weight".into(), "norm.weight".into()],
        );
        assert_eq!(t.children(""), vec!["embed", "layers", "norm"]);
        assert_eq!(t.children("layers"), vec!["0", "1"]);
        assert_eq!(t.children("layers.0.attn"), vec!["q"]);
        let near = t.near_sites("layers.999");
        assert!(near.contains(&"layers.0".to_string()));
        assert_eq!(t.site_index("layers.1"), Some(3));
    }
}

//! Optional record of inter-stage tensor shapes.

/// Collects `(stage, shape)` pairs when enabled; a disabled log ignores
/// every record call.
#[derive(Debug, Clone, Default)]
pub struct ShapeLog {
    enabled: bool,
    entries: Vec<(String, Vec<usize>)>,
}

impl ShapeLog {
    pub fn enabled() -> Self {
        Self {
            enabled: true,
            entries: Vec::new(),
        }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&mut self, stage: impl Into<String>, shape: &[usize]) {
        if self.enabled {
            self.entries.push((stage.into(), shape.to_vec()));
        }
    }

    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }

    /// Shape recorded most recently under `stage`.
    pub fn last(&self, stage: &str) -> Option<&[usize]> {
        self.entries
            .iter()
            .rev()
            .find(|(s, _)| s == stage)
            .map(|(_, shape)| shape.as_slice())
    }
}

/// Record/replay log of the discrete choices made during a forward pass
/// (cluster assignments, argmax picks, top-k sets).
///
/// A fresh log records every choice. After [`Decisions::replay`] the same
/// choices are handed back in order, so a perturbed forward pass follows
/// the same branches as the recorded one. Finite-difference probes rely on
/// this to stay on one smooth piece of the loss.
#[derive(Clone, Debug, Default)]
pub struct Decisions {
    slots: Vec<Vec<usize>>,
    cursor: usize,
    replaying: bool,
    passive: bool,
}

impl Decisions {
    /// A log that records every choice.
    pub fn new() -> Self {
        Self::default()
    }

    /// A log that records nothing; choices are always computed fresh.
    pub fn passive() -> Self {
        Self { passive: true, ..Self::default() }
    }

    pub fn is_recording(&self) -> bool {
        !self.passive && !self.replaying
    }

    /// Switches to replay mode and rewinds to the first recorded choice.
    pub fn replay(&mut self) {
        assert!(!self.passive, "a passive log has nothing to replay");
        self.replaying = true;
        self.cursor = 0;
    }

    pub fn is_replaying(&self) -> bool {
        self.replaying
    }

    /// Returns the next recorded choice when replaying, else computes,
    /// records and returns it.
    pub fn choose(&mut self, compute: impl FnOnce() -> Vec<usize>) -> Vec<usize> {
        if self.replaying {
            let out = self
                .slots
                .get(self.cursor)
                .cloned()
                .expect("replayed forward pass made more choices than were recorded");
            self.cursor += 1;
            out
        } else if self.passive {
            compute()
        } else {
            let v = compute();
            self.slots.push(v.clone());
            v
        }
    }
}

//! Shared domain types: normalized temporal spans, ground-truth events, and
//! scored event predictions.

/// Closed interval on the normalized (0..1) first-person timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

impl Span {
    pub fn new(start: f64, end: f64) -> Self {
        Span { start, end }
    }

    pub fn length(&self) -> f64 {
        (self.end - self.start).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.start.is_finite()
            && self.end.is_finite()
            && self.start >= 0.0
            && self.start < self.end
            && self.end <= 1.0
    }

    /// Temporal intersection-over-union with another span.
    pub fn tiou(&self, other: &Span) -> f64 {
        let inter = (self.end.min(other.end) - self.start.max(other.start)).max(0.0);
        let union = self.length() + other.length() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Temporal generalized IoU in (-1, 1]: IoU minus the normalized slack
    /// of the smallest enclosing interval.
    pub fn giou(&self, other: &Span) -> f64 {
        let inter = (self.end.min(other.end) - self.start.max(other.start)).max(0.0);
        let union = self.length() + other.length() - inter;
        let enclosure = self.end.max(other.end) - self.start.min(other.start);
        if union <= 0.0 || enclosure <= 0.0 {
            return 0.0;
        }
        inter / union - (enclosure - union) / enclosure
    }
}

/// Annotated step on the first-person timeline. The caption slot of the
/// source annotations is deliberately not modeled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthEvent {
    pub span: Span,
    /// true = erroneous execution, false = correct imitation.
    pub error: bool,
}

/// Binary event class used by evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventClass {
    Error,
    Correct,
}

impl EventClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventClass::Error => "error",
            EventClass::Correct => "correct",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "error" => Some(EventClass::Error),
            "correct" => Some(EventClass::Correct),
            _ => None,
        }
    }
}

/// One decoded event candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct EventPrediction {
    pub span: Span,
    /// Foreground probability; doubles as ranking confidence.
    pub fg_score: f64,
    /// Probability that the step is an erroneous execution.
    pub error_prob: f64,
    /// Query slot the prediction came from (deterministic tie-breaker).
    pub query_index: usize,
    /// Captioning is out of scope; the slot stays empty.
    pub caption: Option<String>,
}

impl EventPrediction {
    pub fn predicted_class(&self) -> EventClass {
        if self.error_prob >= 0.5 {
            EventClass::Error
        } else {
            EventClass::Correct
        }
    }
}

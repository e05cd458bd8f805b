//! Simulation script parsing.
//!
//! Scripts are UTF-8, `;`-delimited, one command per line under the header
//! `DATETIME;COMMAND;ARGUMENTS`. Timestamps are `YYYY-MM-DD HH:MM:SS` UTC.

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::store::parse_ts;

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("line {line}: missing header 'DATETIME;COMMAND;ARGUMENTS'")]
    MissingHeader { line: usize },
    #[error("line {line}: bad timestamp '{text}'")]
    BadTimestamp { line: usize, text: String },
    #[error("line {line}: unknown command '{kind}'")]
    UnknownCommand { line: usize, kind: String },
    #[error("line {line}: {kind} expects arguments '{schema}', got {got}")]
    Arity {
        line: usize,
        kind: &'static str,
        schema: &'static str,
        got: usize,
    },
    #[error("line {line}: timestamps must be non-decreasing (farm '{farm}')")]
    NonMonotonic { line: usize, farm: String },
    #[error("script must begin with ACTIVATE")]
    MissingActivate,
    #[error("script must end with PASSIVATE")]
    MissingPassivate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Activate,
    Passivate,
    ActivateSensors,
    PassivateSensors,
    FixOutliers,
    RunPrediction,
    TrainModel,
    GenerateReports,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Activate => "ACTIVATE",
            Self::Passivate => "PASSIVATE",
            Self::ActivateSensors => "CMD_ACTIVATE_SENSORS",
            Self::PassivateSensors => "CMD_PASSIVATE_SENSORS",
            Self::FixOutliers => "CMD_FIX_OUTLIERS",
            Self::RunPrediction => "CMD_RUN_PREDICTION",
            Self::TrainModel => "CMD_TRAIN_MODEL",
            Self::GenerateReports => "CMD_GENERATE_REPORTS",
        }
    }

    /// (expected argument count, human-readable schema)
    fn schema(self) -> (usize, &'static str) {
        match self {
            Self::Activate | Self::Passivate => (0, ""),
            Self::ActivateSensors => (2, "farm;dataset_id"),
            Self::PassivateSensors => (1, "farm"),
            Self::FixOutliers => (6, "farm;sensor;start_date;end_date;method;band_level"),
            Self::RunPrediction => (5, "farm;date;horizons;in_db;out_db"),
            Self::TrainModel => (5, "endpoint;farm;start_date;end_date;epochs"),
            Self::GenerateReports => (4, "farm;start_date;end_date;out_dir"),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ACTIVATE" => Self::Activate,
            "PASSIVATE" => Self::Passivate,
            "CMD_ACTIVATE_SENSORS" => Self::ActivateSensors,
            "CMD_PASSIVATE_SENSORS" => Self::PassivateSensors,
            "CMD_FIX_OUTLIERS" => Self::FixOutliers,
            "CMD_RUN_PREDICTION" => Self::RunPrediction,
            "CMD_TRAIN_MODEL" => Self::TrainModel,
            "CMD_GENERATE_REPORTS" => Self::GenerateReports,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub at: DateTime<Utc>,
    pub kind: CommandKind,
    pub args: Vec<String>,
}

impl Command {
    /// Farm the command addresses; `None` for the global ACTIVATE/PASSIVATE.
    pub fn farm(&self) -> Option<&str> {
        match self.kind {
            CommandKind::Activate | CommandKind::Passivate => None,
            CommandKind::TrainModel => Some(&self.args[1]),
            _ => Some(&self.args[0]),
        }
    }
}

pub const SCRIPT_HEADER: &str = "DATETIME;COMMAND;ARGUMENTS";

/// Parses a full simulation script, validating the header, per-line
/// schemas, timestamp monotonicity, and the ACTIVATE/PASSIVATE framing.
pub fn parse_simulation_file(text: &str) -> Result<Vec<Command>, ScriptError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == SCRIPT_HEADER => {}
        _ => return Err(ScriptError::MissingHeader { line: 1 }),
    }
    let mut commands = Vec::new();
    let mut last_at: Option<DateTime<Utc>> = None;
    for (i, raw) in lines {
        let line = i + 1;
        let text = raw.trim();
        if text.is_empty() {
            continue;
        }
        let mut fields = text.split(';');
        let ts = fields.next().unwrap_or("");
        let at = parse_ts(ts).ok_or_else(|| ScriptError::BadTimestamp {
            line,
            text: ts.to_string(),
        })?;
        let kind_str = fields.next().unwrap_or("");
        let kind = CommandKind::parse(kind_str).ok_or_else(|| ScriptError::UnknownCommand {
            line,
            kind: kind_str.to_string(),
        })?;
        let args: Vec<String> = fields.map(str::to_string).collect();
        let (want, schema) = kind.schema();
        if args.len() != want {
            return Err(ScriptError::Arity {
                line,
                kind: kind.name(),
                schema,
                got: args.len(),
            });
        }
        let cmd = Command { at, kind, args };
        if let Some(prev) = last_at {
            if at < prev {
                return Err(ScriptError::NonMonotonic {
                    line,
                    farm: cmd.farm().unwrap_or("<global>").to_string(),
                });
            }
        }
        last_at = Some(at);
        commands.push(cmd);
    }
    if let Some(first) = commands.first() {
        if first.kind != CommandKind::Activate {
            return Err(ScriptError::MissingActivate);
        }
        if commands.last().unwrap().kind != CommandKind::Passivate {
            return Err(ScriptError::MissingPassivate);
        }
    }
    Ok(commands)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_activate_sensors_line() {
        let text = "DATETIME;COMMAND;ARGUMENTS\n\
                    2010-06-01 00:00:00;ACTIVATE\n\
                    2010-06-01 00:00:00;CMD_ACTIVATE_SENSORS;Oahu;oahu.csv\n\
                    2010-06-02 00:00:00;PASSIVATE\n";
        let cmds = parse_simulation_file(text).unwrap();
        assert_eq!(cmds.len(), 3);
        assert_eq!(cmds[1].kind, CommandKind::ActivateSensors);
        assert_eq!(cmds[1].args, vec!["Oahu", "oahu.csv"]);
        assert_eq!(cmds[1].farm(), Some("Oahu"));
    }

    #[test]
    fn h5_names_are_opaque_ids() {
        let text = "DATETIME;COMMAND;ARGUMENTS\n\
                    2010-06-01 00:00:00;ACTIVATE\n\
                    2010-06-01 00:00:00;CMD_ACTIVATE_SENSORS;Oahu;oahu.h5\n\
                    2010-06-02 00:00:00;PASSIVATE\n";
        let cmds = parse_simulation_file(text).unwrap();
        assert_eq!(cmds[1].args[1], "oahu.h5");
    }

    #[test]
    fn header_only_is_empty() {
        let cmds = parse_simulation_file("DATETIME;COMMAND;ARGUMENTS\n").unwrap();
        assert!(cmds.is_empty());
    }

    #[test]
    fn unknown_command_reports_line() {
        let text = "DATETIME;COMMAND;ARGUMENTS\n2010-06-27 00:00:00;CMD_BOGUS;x\n";
        match parse_simulation_file(text) {
            Err(ScriptError::UnknownCommand { line, kind }) => {
                assert_eq!(line, 2);
                assert_eq!(kind, "CMD_BOGUS");
            }
            other => panic!("expected unknown-command error, got {other:?}"),
        }
    }

    #[test]
    fn arity_error_names_schema() {
        let text = "DATETIME;COMMAND;ARGUMENTS\n\
                    2010-06-01 00:00:00;ACTIVATE\n\
                    2010-06-01 01:00:00;CMD_FIX_OUTLIERS;Oahu;s1\n\
                    2010-06-02 00:00:00;PASSIVATE\n";
        match parse_simulation_file(text) {
            Err(ScriptError::Arity { line, schema, .. }) => {
                assert_eq!(line, 3);
                assert!(schema.contains("band_level"));
            }
            other => panic!("expected arity error, got {other:?}"),
        }
    }

    #[test]
    fn non_monotonic_rejected() {
        let text = "DATETIME;COMMAND;ARGUMENTS\n\
                    2010-06-01 00:00:00;ACTIVATE\n\
                    2010-06-01 02:00:00;CMD_PASSIVATE_SENSORS;Oahu\n\
                    2010-06-01 01:00:00;CMD_PASSIVATE_SENSORS;Oahu\n\
                    2010-06-02 00:00:00;PASSIVATE\n";
        assert!(matches!(
            parse_simulation_file(text),
            Err(ScriptError::NonMonotonic { line: 4, .. })
        ));
    }

    #[test]
    fn missing_framing_rejected() {
        let no_passivate = "DATETIME;COMMAND;ARGUMENTS\n\
                            2010-06-01 00:00:00;ACTIVATE\n\
                            2010-06-01 01:00:00;CMD_PASSIVATE_SENSORS;Oahu\n";
        assert!(matches!(
            parse_simulation_file(no_passivate),
            Err(ScriptError::MissingPassivate)
        ));
        let no_activate = "DATETIME;COMMAND;ARGUMENTS\n\
                           2010-06-01 01:00:00;CMD_PASSIVATE_SENSORS;Oahu\n\
                           2010-06-02 00:00:00;PASSIVATE\n";
        assert!(matches!(
            parse_simulation_file(no_activate),
            Err(ScriptError::MissingActivate)
        ));
    }

    #[test]
    fn missing_header_rejected() {
        assert!(matches!(
            parse_simulation_file("2010-06-01 00:00:00;ACTIVATE\n"),
            Err(ScriptError::MissingHeader { line: 1 })
        ));
    }
}

//! Line-based wire protocol for a hardware bridge.
//!
//! ```text
//! SEP <mm>                               -> OK <achieved_mm>
//! LOWER                                  -> OK <force_N> | ERR TIMEOUT
//! BURST <mask> <duty_a> <duty_b> [<duty_c>] -> OK
//! RAISE                                  -> OK
//! ```
//!
//! ASCII, `.` as decimal point, one command per `\n`-terminated line. Errors
//! other than `TIMEOUT` are sent as `ERR <CODE> [detail]`.

use std::io::{self, BufRead, Write};
use std::time::Instant;

use super::{Apparatus, ApparatusConfig, ApparatusError, MotorMask};

/// Client side: drives a remote rig over any byte stream.
pub struct LineBridge<R, W> {
    config: ApparatusConfig,
    reader: R,
    writer: W,
    started: Instant,
}

impl<R: BufRead + Send, W: Write + Send> LineBridge<R, W> {
    pub fn new(config: ApparatusConfig, reader: R, writer: W) -> Self {
        Self { config, reader, writer, started: Instant::now() }
    }

    fn exchange(&mut self, line: &str) -> Result<String, ApparatusError> {
        let io_err = |e: io::Error| ApparatusError::Unreachable(e.to_string());
        self.writer.write_all(line.as_bytes()).map_err(io_err)?;
        self.writer.write_all(b"\n").map_err(io_err)?;
        self.writer.flush().map_err(io_err)?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply).map_err(io_err)? == 0 {
            return Err(ApparatusError::Unreachable("bridge closed the connection".into()));
        }
        let reply = reply.trim_end();
        if let Some(rest) = reply.strip_prefix("OK") {
            return Ok(rest.trim().to_string());
        }
        match reply.strip_prefix("ERR ") {
            Some(err) => Err(decode_error(err)),
            None => Err(ApparatusError::Protocol(format!("unexpected reply {reply:?}"))),
        }
    }

    fn exchange_number(&mut self, line: &str) -> Result<f64, ApparatusError> {
        let value = self.exchange(line)?;
        value
            .parse()
            .map_err(|_| ApparatusError::Protocol(format!("expected a number, got {value:?}")))
    }
}

fn decode_error(err: &str) -> ApparatusError {
    let mut parts = err.splitn(2, ' ');
    let code = parts.next().unwrap_or_default();
    let detail = parts.next().unwrap_or_default().to_string();
    match code {
        "TIMEOUT" => ApparatusError::ContactTimeout,
        "NOT_IN_CONTACT" => ApparatusError::NotInContact,
        "OUT_OF_RANGE" => {
            let nums: Vec<f64> = detail.split_whitespace().filter_map(|s| s.parse().ok()).collect();
            match nums[..] {
                [target, min, max] => ApparatusError::OutOfRange { target, min, max },
                _ => ApparatusError::Protocol(format!("OUT_OF_RANGE {detail}")),
            }
        }
        _ => ApparatusError::Protocol(err.to_string()),
    }
}

fn encode_error(err: &ApparatusError) -> String {
    match err {
        ApparatusError::ContactTimeout => "ERR TIMEOUT".into(),
        ApparatusError::NotInContact => "ERR NOT_IN_CONTACT".into(),
        ApparatusError::OutOfRange { target, min, max } => format!("ERR OUT_OF_RANGE {target} {min} {max}"),
        other => format!("ERR DEVICE {other}"),
    }
}

impl<R: BufRead + Send, W: Write + Send> Apparatus for LineBridge<R, W> {
    fn config(&self) -> &ApparatusConfig {
        &self.config
    }

    fn set_separation(&mut self, target_mm: f64) -> Result<f64, ApparatusError> {
        self.exchange_number(&format!("SEP {target_mm}"))
    }

    fn lower_to_contact(&mut self) -> Result<f64, ApparatusError> {
        self.exchange_number("LOWER")
    }

    fn burst(&mut self, mask: MotorMask, duties: [f64; 3]) -> Result<(), ApparatusError> {
        let line = if mask.contains(super::Motor::C) {
            format!("BURST {} {} {} {}", mask.0, duties[0], duties[1], duties[2])
        } else {
            format!("BURST {} {} {}", mask.0, duties[0], duties[1])
        };
        self.exchange(&line).map(|_| ())
    }

    fn raise(&mut self) -> Result<(), ApparatusError> {
        self.exchange("RAISE").map(|_| ())
    }

    fn pause(&mut self, ms: f64) {
        std::thread::sleep(std::time::Duration::from_secs_f64(ms.max(0.0) / 1000.0));
    }

    fn elapsed_ms(&self) -> f64 {
        self.started.elapsed().as_secs_f64() * 1000.0
    }
}

/// Parses and executes one command line against `device`, returning the reply
/// line without its terminator.
pub fn handle_line<A: Apparatus + ?Sized>(device: &mut A, line: &str) -> String {
    let mut words = line.split_whitespace();
    let cmd = words.next().unwrap_or_default();
    let args: Vec<&str> = words.collect();
    let nums: Result<Vec<f64>, _> = args.iter().map(|s| s.parse::<f64>()).collect();
    let Ok(nums) = nums else {
        return format!("ERR SYNTAX {line}");
    };
    let result = match (cmd, nums.as_slice()) {
        ("SEP", [mm]) => device.set_separation(*mm).map(|a| format!("OK {a}")),
        ("LOWER", []) => device.lower_to_contact().map(|f| format!("OK {f}")),
        ("RAISE", []) => device.raise().map(|_| "OK".to_string()),
        ("BURST", [mask, a, b]) | ("BURST", [mask, a, b, _]) if mask.fract() == 0.0 && (0.0..8.0).contains(mask) => {
            let c = nums.get(3).copied().unwrap_or(0.0);
            device.burst(MotorMask(*mask as u8), [*a, *b, c]).map(|_| "OK".to_string())
        }
        _ => return format!("ERR SYNTAX {line}"),
    };
    result.unwrap_or_else(|e| encode_error(&e))
}

/// Serves the wire protocol for `device` until the reader reaches EOF.
pub fn serve<A: Apparatus + ?Sized, R: BufRead, W: Write>(device: &mut A, reader: R, mut writer: W) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(writer, "{}", handle_line(device, line.trim()))?;
        writer.flush()?;
    }
    Ok(())
}

//! Supported upload containers and their durations.

use std::io::Cursor;

use super::ProviderError;

/// Audio containers accepted for transcription.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioFormat {
    /// RIFF/WAVE, PCM.
    Wav,
    /// MPEG-1/2 Layer III.
    Mpeg,
}

impl AudioFormat {
    pub fn from_media_type(media_type: &str) -> Result<Self, ProviderError> {
        let essence = media_type
            .split(';')
            .next()
            .unwrap_or_default()
            .trim()
            .to_ascii_lowercase();
        match essence.as_str() {
            "audio/wav" | "audio/wave" | "audio/x-wav" | "audio/vnd.wave" => Ok(AudioFormat::Wav),
            "audio/mpeg" | "audio/mp3" => Ok(AudioFormat::Mpeg),
            _ => Err(ProviderError::UnsupportedMediaType(media_type.to_string())),
        }
    }

    pub fn media_type(self) -> &'static str {
        match self {
            AudioFormat::Wav => "audio/wav",
            AudioFormat::Mpeg => "audio/mpeg",
        }
    }

    pub fn file_extension(self) -> &'static str {
        match self {
            AudioFormat::Wav => "wav",
            AudioFormat::Mpeg => "mp3",
        }
    }
}

/// Playback duration of an audio upload in milliseconds, read from the
/// container. Fails on empty or undecodable input.
pub fn duration_ms(bytes: &[u8], format: AudioFormat) -> Result<u64, ProviderError> {
    if bytes.is_empty() {
        return Err(ProviderError::InvalidInput("audio is empty".into()));
    }
    match format {
        AudioFormat::Wav => {
            let reader = hound::WavReader::new(Cursor::new(bytes))
                .map_err(|e| ProviderError::CorruptAudio(e.to_string()))?;
            let rate = u64::from(reader.spec().sample_rate);
            if rate == 0 {
                return Err(ProviderError::CorruptAudio("sample rate is zero".into()));
            }
            Ok(u64::from(reader.duration()) * 1000 / rate)
        }
        AudioFormat::Mpeg => {
            let d = mp3_duration::from_read(&mut Cursor::new(bytes))
                .map_err(|e| ProviderError::CorruptAudio(e.to_string()))?;
            if d.is_zero() {
                return Err(ProviderError::CorruptAudio(
                    "no MPEG audio frames found".into(),
                ));
            }
            Ok(d.as_millis() as u64)
        }
    }
}

#[cfg(test)]
pub(crate) fn wav_fixture(samples: usize, sample_rate: u32, seed: u8) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut out = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut out, spec).unwrap();
        for i in 0..samples {
            w.write_sample(((i as i32 * 37 + seed as i32) % 2000 - 1000) as i16)
                .unwrap();
        }
        w.finalize().unwrap();
    }
    out.into_inner()
}

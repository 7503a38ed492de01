#include "smokewatch/clock.hpp"

#include <charconv>
#include <stdexcept>

#include <fmt/chrono.h>
#include <fmt/format.h>

namespace smokewatch {

Timestamp SystemClock::now() const {
  return std::chrono::time_point_cast<Millis>(std::chrono::system_clock::now());
}

std::string format_timestamp(Timestamp t) {
  const auto day = std::chrono::floor<std::chrono::days>(t);
  const std::chrono::year_month_day ymd{day};
  const std::chrono::hh_mm_ss hms{t - day};
  return fmt::format("{:04}-{:02}-{:02}T{:02}:{:02}:{:02}.{:03}Z", static_cast<int>(ymd.year()),
                     static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), hms.hours().count(),
                     hms.minutes().count(), hms.seconds().count(), hms.subseconds().count());
}

namespace {

int take_int(std::string_view& s, std::size_t digits) {
  if (s.size() < digits) throw std::invalid_argument("timestamp truncated");
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + digits, v);
  if (ec != std::errc() || ptr != s.data() + digits) throw std::invalid_argument("timestamp: bad digits");
  s.remove_prefix(digits);
  return v;
}

void expect(std::string_view& s, char c) {
  if (s.empty() || s.front() != c) throw std::invalid_argument(std::string("timestamp: expected '") + c + "'");
  s.remove_prefix(1);
}

}  // namespace

Timestamp parse_timestamp(std::string_view text) {
  std::string_view s = text;
  const int year = take_int(s, 4);
  expect(s, '-');
  const int month = take_int(s, 2);
  expect(s, '-');
  const int day = take_int(s, 2);
  expect(s, 'T');
  const int hour = take_int(s, 2);
  expect(s, ':');
  const int minute = take_int(s, 2);
  expect(s, ':');
  const int second = take_int(s, 2);
  int millis = 0;
  if (!s.empty() && s.front() == '.') {
    s.remove_prefix(1);
    millis = take_int(s, 3);
  }
  expect(s, 'Z');
  if (!s.empty()) throw std::invalid_argument("timestamp: trailing characters");

  const std::chrono::year_month_day ymd{std::chrono::year{year}, std::chrono::month{static_cast<unsigned>(month)},
                                        std::chrono::day{static_cast<unsigned>(day)}};
  if (!ymd.ok() || hour > 23 || minute > 59 || second > 60) {
    throw std::invalid_argument("timestamp out of range: " + std::string(text));
  }
  return Timestamp{std::chrono::sys_days{ymd}.time_since_epoch()} + std::chrono::hours{hour} +
         std::chrono::minutes{minute} + Seconds{second} + Millis{millis};
}

}  // namespace smokewatch

/* Copyright 2026 The Lanepipe Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef LANEPIPE_CRC32_HPP_
#define LANEPIPE_CRC32_HPP_

#include <cstddef>
#include <cstdint>

namespace lanepipe {

// CRC-32 (IEEE 802.3 reflected form, polynomial 0xEDB88320). Known answer:
// crc32 of the ASCII bytes "123456789" is 0xCBF43926.
std::uint32_t crc32(const void* data, std::size_t len);

// Streaming form: feed `state` back in; begin and end with crc32_init/_final.
std::uint32_t crc32_init();
std::uint32_t crc32_update(std::uint32_t state, const void* data, std::size_t len);
std::uint32_t crc32_final(std::uint32_t state);

}  // namespace lanepipe

#endif  // LANEPIPE_CRC32_HPP_
